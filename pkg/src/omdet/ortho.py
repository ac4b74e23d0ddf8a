"""Frozen orthonormal class prototypes and the cosine scoring head.

The basis is drawn once from a seeded Gaussian, average-pooled over the
kernel's spatial extent, orthogonalized with classical Gram-Schmidt (plus one
re-orthogonalization pass), and never updated afterwards. Scoring a feature
map against it is a per-location cosine similarity, differentiable with
respect to the features only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Array, Node
from .errors import ContractError, DegeneracyError

GS_TOL = 1e-8
NORM_EPS = 1e-12
REDRAW_ATTEMPTS = 8


def gram_schmidt(rows: Array, tol: float = GS_TOL) -> Array:
    """Orthonormalize the rows of a [C, N] matrix, C <= N.

    Classical Gram-Schmidt with one re-orthogonalization pass per row. Row i
    of the output spans the same space as rows[0..i] of the input. Raises
    DegeneracyError when a residual collapses below ``tol`` (numerically
    dependent input).
    """
    rows = np.array(rows, dtype=np.float64, copy=True)
    if rows.ndim != 2:
        raise ContractError(f"gram_schmidt: expected 2-d input, got shape {rows.shape}")
    c, n = rows.shape
    if c > n:
        raise ContractError(f"gram_schmidt: need C <= N, got C={c}, N={n}")
    if tol <= 0:
        raise ContractError("gram_schmidt: tol must be > 0")
    q = np.zeros_like(rows)
    for i in range(c):
        v = rows[i].copy()
        if i:
            v -= q[:i].T @ (q[:i] @ v)
            v -= q[:i].T @ (q[:i] @ v)  # second pass for numerical hygiene
        norm = float(np.linalg.norm(v))
        if norm < tol:
            raise DegeneracyError(
                f"gram_schmidt: residual norm {norm:.3e} < tol at row {i}"
            )
        q[i] = v / norm
    return q


@dataclass(frozen=True)
class OrthoBasis:
    """Frozen orthonormal prototype matrix, one unit row per class."""

    basis: Array  # [C, N], read-only
    seed: int
    num_classes: int
    feature_dim: int
    kernel_size: int
    pooled_from: tuple | None = None  # original kernel shape before pooling

    def __post_init__(self):
        self.basis.setflags(write=False)

    def to_json_dict(self) -> dict:
        return {
            "seed": self.seed,
            "C": self.num_classes,
            "N": self.feature_dim,
            "k": self.kernel_size,
            "rows": self.basis.tolist(),
        }


@dataclass
class ScoreMap:
    """Per-location cosine scores, shape [..., H, W, C], values in [-1, 1]."""

    scores: Node
    num_classes: int


def draw_kernel(seed: int, num_classes: int, feature_dim: int, kernel_size: int,
                attempt: int = 0) -> Array:
    """Seeded standard-Gaussian kernel draw of shape [C, k, k, N]."""
    rng = np.random.default_rng((seed, attempt))
    return rng.standard_normal((num_classes, kernel_size, kernel_size, feature_dim))


def build_orthogonal_basis(seed: int, num_classes: int, feature_dim: int,
                           kernel_size: int = 3) -> OrthoBasis:
    """Construct the frozen basis: draw, average-pool spatially, orthogonalize.

    Deterministic in its arguments. On a degenerate draw the seed stream is
    advanced and the draw repeated, up to REDRAW_ATTEMPTS times.
    """
    if num_classes > feature_dim:
        raise ContractError(
            f"build_orthogonal_basis: need C <= N, got C={num_classes}, N={feature_dim}"
        )
    if num_classes < 1 or kernel_size < 1:
        raise ContractError("build_orthogonal_basis: C and k must be >= 1")
    last_err: DegeneracyError | None = None
    for attempt in range(REDRAW_ATTEMPTS):
        kernel = draw_kernel(seed, num_classes, feature_dim, kernel_size, attempt)
        pooled = kernel.mean(axis=(1, 2))
        try:
            basis = gram_schmidt(pooled, GS_TOL)
        except DegeneracyError as err:
            last_err = err
            continue
        return OrthoBasis(
            basis=basis,
            seed=seed,
            num_classes=num_classes,
            feature_dim=feature_dim,
            kernel_size=kernel_size,
            pooled_from=(num_classes, kernel_size, kernel_size, feature_dim),
        )
    raise DegeneracyError(
        f"build_orthogonal_basis: {REDRAW_ATTEMPTS} draws were degenerate "
        f"(last: {last_err})"
    )


def export_basis(basis: OrthoBasis, path) -> None:
    """Write the basis as JSON for reproducibility audits."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(basis.to_json_dict(), fh)


def load_basis(path) -> OrthoBasis:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    return basis_from_json_dict(d)


def basis_from_json_dict(d: dict) -> OrthoBasis:
    rows = np.asarray(d["rows"], dtype=np.float64)
    if rows.shape != (d["C"], d["N"]):
        raise ContractError(
            f"basis rows shape {rows.shape} does not match C={d['C']}, N={d['N']}"
        )
    return OrthoBasis(
        basis=rows,
        seed=int(d["seed"]),
        num_classes=int(d["C"]),
        feature_dim=int(d["N"]),
        kernel_size=int(d["k"]),
    )


def _feature_rows(features: Node, feature_dim: int, opname: str):
    """[N,H,W] or [B,N,H,W] -> ([M, N] node, leading output shape)."""
    shape = features.value.shape
    if len(shape) == 3:
        n, h, w = shape
        lead = (h, w)
    elif len(shape) == 4:
        b, n, h, w = shape
        lead = (b, h, w)
    else:
        raise ContractError(f"{opname}: features must be [N,H,W] or [B,N,H,W], got {shape}")
    if n != feature_dim:
        raise ContractError(
            f"{opname}: feature dim {n} does not match expected {feature_dim}"
        )
    axes = (1, 2, 0) if len(shape) == 3 else (0, 2, 3, 1)
    flat = ad.reshape(ad.transpose(features, axes), (int(np.prod(lead)), n))
    return flat, lead


def om_score(features: Node, basis: OrthoBasis, eps: float = NORM_EPS) -> ScoreMap:
    """Cosine of every location's feature vector against every prototype.

    Output shape [H,W,C] (or [B,H,W,C]); values clamped into [-1, 1] against
    last-ulp rounding. Gradient flows to the features only; the basis is a
    constant.
    """
    flat, lead = _feature_rows(features, basis.feature_dim, "om_score")
    norms = np.linalg.norm(basis.basis, axis=1, keepdims=True)
    unit = ad.constant((basis.basis / norms).T)  # [N, C]
    raw = ad.matmul(ad.l2_normalize(flat, eps), unit)
    clipped = ad.maximum(ad.minimum(raw, 1.0), -1.0)
    scores = ad.reshape(clipped, lead + (basis.num_classes,))
    return ScoreMap(scores=scores, num_classes=basis.num_classes)


def linear_score(features: Node, weights: Node, bias: Node) -> Node:
    """Per-location affine map, the learnable head the cosine head replaces.

    weights [C, N], bias [C]; output [H,W,C] (or [B,H,W,C]).
    """
    c, n = weights.value.shape
    if bias.value.shape != (c,):
        raise ContractError(
            f"linear_score: bias shape {bias.value.shape} does not match C={c}"
        )
    flat, lead = _feature_rows(features, n, "linear_score")
    m = flat.value.shape[0]
    logits = ad.matmul(flat, ad.transpose(weights, (1, 0)))
    bias_rows = ad.matmul(ad.constant(np.ones((m, 1))), ad.reshape(bias, (1, c)))
    return ad.reshape(ad.add(logits, bias_rows), lead + (c,))
