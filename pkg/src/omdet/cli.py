"""Command-line entry point: dataset generation, training, evaluation, A/B study.

Every command resolves its configuration (file defaults + flag overrides),
writes the resolved config and its hash next to its outputs, and is fully
reproducible from those artifacts.

Exit codes: 0 ok, 2 usage/config error, 3 I/O error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evalkit
from .configio import canonical_json, config_hash, from_dict, to_dict
from .detector import DetectorConfig, TrainedModel, infer, load_model, save_model, train
from .errors import ContractError, DatasetFormatError, NumericError
from .ortho import export_basis
from .synthgen import GenConfig, generate_dataset, read_dataset, write_dataset

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


@dataclass
class EvalConfig:
    iou_thresh: float = 0.5
    score_threshold: float = 0.05
    nms_iou: float = 0.5


@dataclass
class ExperimentConfig:
    """Declarative description of one experiment run."""

    generator: GenConfig = field(default_factory=GenConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    train_scenes: int = 800
    test_scenes: int = 200
    data_seed: int = 0
    output_dir: str = "runs/exp"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ContractError("ExperimentConfig: expected a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"ExperimentConfig: unknown keys {sorted(unknown)}")
        kwargs = {}
        if "generator" in d:
            kwargs["generator"] = from_dict(GenConfig, d["generator"])
        if "detector" in d:
            kwargs["detector"] = from_dict(DetectorConfig, d["detector"])
        if "eval" in d:
            kwargs["eval"] = from_dict(EvalConfig, d["eval"])
        for k in ("train_scenes", "test_scenes", "data_seed", "output_dir"):
            if k in d:
                kwargs[k] = d[k]
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "generator": to_dict(self.generator),
            "detector": to_dict(self.detector),
            "eval": to_dict(self.eval),
            "train_scenes": self.train_scenes,
            "test_scenes": self.test_scenes,
            "data_seed": self.data_seed,
            "output_dir": self.output_dir,
        }

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())


def load_experiment_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return ExperimentConfig.from_dict(json.load(fh))


def _write_resolved(cfg: ExperimentConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = cfg.to_dict()
    payload = {"config": resolved, "config_hash": cfg.hash}
    with open(out_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = load_experiment_config(args.config) if args.config else ExperimentConfig()
    gen = cfg.generator
    if args.classes is not None:
        gen = dataclasses.replace(gen, num_classes=args.classes)
    if args.delta is not None:
        gen = dataclasses.replace(gen, delta=args.delta)
    scenes = generate_dataset(args.seed, args.scenes, gen)
    manifest = write_dataset(scenes, args.out, gen, args.seed)
    print(canonical_json(dataclasses.asdict(manifest)))
    return EXIT_OK


def _train_one(scenes, det_cfg: DetectorConfig, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"
    with open(log_path, "w", encoding="utf-8") as fh:
        model, log = train(scenes, det_cfg,
                           log_hook=lambda rec: fh.write(canonical_json(rec) + "\n"))
    save_model(model, out_dir / "model.bin")
    if model.basis is not None:
        export_basis(model.basis, out_dir / "basis.json")
    return model, log


def cmd_train(args) -> int:
    cfg = load_experiment_config(args.config) if args.config else ExperimentConfig()
    det = cfg.detector
    if args.head:
        det = dataclasses.replace(det, head=args.head)
    if args.seed is not None:
        det = dataclasses.replace(det, seed=args.seed)
    scenes, manifest = read_dataset(args.data)
    if manifest.num_classes != det.num_classes:
        raise ContractError(
            f"dataset has {manifest.num_classes} classes, config expects {det.num_classes}"
        )
    out_dir = Path(args.out)
    cfg = dataclasses.replace(cfg, detector=det, output_dir=str(out_dir))
    _write_resolved(cfg, out_dir)
    model, log = _train_one(scenes, det, out_dir)
    final = log[-1]
    print(canonical_json({k: final[k] for k in ("epoch", "loss_cls", "loss_reg",
                                                "loss_ctr", "loss_aux")}))
    return EXIT_OK


def _evaluate_model(model: TrainedModel, scenes, ecfg: EvalConfig, metadata: dict):
    dets = [infer(model, s, ecfg.score_threshold, ecfg.nms_iou) for s in scenes]
    anns = [s.annotations for s in scenes]
    rows = evalkit.collect_positive_features(model, scenes)
    matched = [(f, lab) for _, lab, ok, f in rows if ok]
    if matched:
        ortho = evalkit.orthogonality_metrics(
            np.array([f for f, _ in matched]), [lab for _, lab in matched]
        )
    else:
        ortho = {"classes": [], "mean_intra_cosine": None,
                 "mean_inter_abs_cosine": None, "pair_cosine": []}
    return evalkit.evaluate(dets, anns, model.config.num_classes, ecfg.iou_thresh,
                            ortho=ortho, metadata=metadata)


def _write_report(report, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_json_dict(), fh, sort_keys=True, indent=1)
    evalkit.write_confusion_csv(report.confusion, out_dir / "confusion.csv")


def cmd_eval(args) -> int:
    cfg = load_experiment_config(args.config) if args.config else ExperimentConfig()
    model = load_model(args.model)
    scenes, _ = read_dataset(args.data)
    metadata = {
        "model": str(args.model),
        "data": str(args.data),
        "config_hash": cfg.hash,
        "seed": model.config.seed,
        "head": model.config.head,
    }
    report = _evaluate_model(model, scenes, cfg.eval, metadata)
    out_dir = Path(args.out)
    _write_resolved(cfg, out_dir)
    _write_report(report, out_dir)
    if args.features:
        evalkit.export_features(model, scenes, out_dir / "features.csv")
    print(f"mAP@{cfg.eval.iou_thresh}: {report.mean_ap:.4f}")
    return EXIT_OK


def _study_job(payload):
    """One (seed, head) training + evaluation; runs in a worker process."""
    cfg_dict, seed, head, out_root = payload
    cfg = ExperimentConfig.from_dict(cfg_dict)
    det = dataclasses.replace(cfg.detector, head=head, seed=seed)
    train_scenes = generate_dataset(
        _study_data_seed(cfg.data_seed, seed, "train"), cfg.train_scenes, cfg.generator)
    test_scenes = generate_dataset(
        _study_data_seed(cfg.data_seed, seed, "test"), cfg.test_scenes, cfg.generator)
    out_dir = Path(out_root) / f"seed_{seed}" / head
    model, _ = _train_one(train_scenes, det, out_dir)
    report = _evaluate_model(model, test_scenes, cfg.eval,
                             {"seed": seed, "head": head, "config_hash": cfg.hash})
    _write_report(report, out_dir)
    fam = evalkit.within_family_confusion(report.confusion, cfg.generator.num_families)
    return {
        "seed": seed,
        "head": head,
        "map": report.mean_ap,
        "family_confusion": fam,
        "inter_cos": report.ortho.get("mean_inter_abs_cosine"),
    }


def _study_data_seed(data_seed: int, run_seed: int, split: str) -> int:
    return int(np.random.SeedSequence(
        (data_seed, run_seed, 0 if split == "train" else 1)).generate_state(1)[0])


def run_ab_study(cfg: ExperimentConfig, seeds, out_root, jobs: int = 1) -> dict:
    """Train om and linear heads per seed, evaluate both, aggregate pairs."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    payloads = [(cfg.to_dict(), seed, head, str(out_root))
                for seed in seeds for head in ("om", "linear")]
    if jobs > 1:
        import multiprocessing as mp

        ctx = mp.get_context("spawn")
        with ctx.Pool(processes=jobs) as pool:
            results = pool.map(_study_job, payloads)
    else:
        results = [_study_job(p) for p in payloads]

    by_key = {(r["seed"], r["head"]): r for r in results}
    records = []
    for seed in seeds:
        om, lin = by_key[(seed, "om")], by_key[(seed, "linear")]
        records.append({
            "seed": seed,
            "map_om": om["map"],
            "map_linear": lin["map"],
            "inter_cos_om": om["inter_cos"],
            "inter_cos_linear": lin["inter_cos"],
            "family_confusion_om": om["family_confusion"],
            "family_confusion_linear": lin["family_confusion"],
        })
    mean = lambda key: float(np.mean([r[key] for r in records]))
    summary = {
        "config_hash": cfg.hash,
        "seeds": list(seeds),
        "records": records,
        "means": {k: mean(k) for k in ("map_om", "map_linear", "inter_cos_om",
                                       "inter_cos_linear", "family_confusion_om",
                                       "family_confusion_linear")},
    }
    with open(out_root / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
    return summary


def cmd_ab_study(args) -> int:
    cfg = load_experiment_config(args.config) if args.config else ExperimentConfig()
    seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
    if not seeds:
        raise ContractError("ab-study: --seeds must list at least one seed")
    out_root = Path(args.out)
    _write_resolved(cfg, out_root)
    summary = run_ab_study(cfg, seeds, out_root, jobs=max(1, args.jobs))
    print(canonical_json(summary["means"]))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument plumbing


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="omdet",
                                 description="Orthogonal-vs-linear detector head lab")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--scenes", type=int, default=800)
    g.add_argument("--classes", type=int, default=None)
    g.add_argument("--delta", type=float, default=None)
    g.add_argument("--out", required=True)
    g.add_argument("--config", default=None)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a detector on a dataset")
    t.add_argument("--config", default=None)
    t.add_argument("--head", choices=["om", "linear", "om_softmax", "linear_softmax"],
                   default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a trained model")
    e.add_argument("--config", default=None)
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--features", action="store_true",
                   help="also export per-location features.csv")
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("ab-study", help="paired om-vs-linear study over seeds")
    s.add_argument("--config", default=None)
    s.add_argument("--seeds", default="0,1,2,3,4")
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=min(2, os.cpu_count() or 1))
    s.set_defaults(fn=cmd_ab_study)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ContractError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetFormatError, OSError) as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
