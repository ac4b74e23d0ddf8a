"""Dataclass <-> dict plumbing shared by configs: strict parsing and hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json

from .errors import ContractError


def from_dict(cls, d: dict):
    """Build a dataclass from a dict, rejecting unknown keys."""
    if not isinstance(d, dict):
        raise ContractError(f"{cls.__name__}: expected an object, got {type(d).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ContractError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in d:
            v = d[f.name]
            if isinstance(v, list):
                v = tuple(v)
            kwargs[f.name] = v
    return cls(**kwargs)


def to_dict(cfg) -> dict:
    d = dataclasses.asdict(cfg)
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    """Stable sha256 of a json-serializable object."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()
