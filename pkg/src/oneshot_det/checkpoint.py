"""Portable checkpoint archive: named arrays plus a JSON manifest in one ``.npz``."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .detcore import GROUPS, DetectorArch, Params, group_of

MANIFEST_KEY = "__manifest__"


class MissingGroupError(KeyError):
    """A checkpoint lacks one of the required parameter groups."""


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    params: Params
    config: dict
    arch: DetectorArch = field(default_factory=DetectorArch)
    epoch: int = 0
    metric_log: list[dict] = field(default_factory=list)
    seed: int = 0
    trained_groups: tuple[str, ...] = GROUPS

    def groups(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {g: [] for g in GROUPS}
        for k in self.params:
            out[group_of(k)].append(k)
        return out

    def require_groups(self, *needed: str) -> None:
        present = {g for g, names in self.groups().items() if names}
        for g in needed or GROUPS:
            if g not in present:
                raise MissingGroupError(f"checkpoint is missing parameter group {g!r}")

    def manifest(self) -> dict[str, Any]:
        return {
            "format": 1,
            "names": list(self.params),
            "groups": self.groups(),
            "trained_groups": list(self.trained_groups),
            "config": self.config,
            "config_hash": config_hash(self.config),
            "arch": self.arch.to_dict(),
            "seed": self.seed,
            "epoch": self.epoch,
            "metric_log": self.metric_log,
        }

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = {k: v.detach().cpu().numpy() for k, v in self.params.items()}
        blob = np.frombuffer(json.dumps(self.manifest(), sort_keys=True).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays, **{MANIFEST_KEY: blob})
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Checkpoint":
        with np.load(Path(path), allow_pickle=False) as z:
            if MANIFEST_KEY not in z.files:
                raise ValueError(f"{path} has no manifest")
            man = json.loads(z[MANIFEST_KEY].tobytes().decode())
            params = {}
            for name in man["names"]:
                if name not in z.files:
                    raise MissingGroupError(f"checkpoint is missing parameter group {group_of(name)!r} ({name})")
                params[name] = torch.from_numpy(z[name].copy())
        return cls(
            params=params, config=man["config"], arch=DetectorArch.from_dict(man["arch"]),
            epoch=man["epoch"], metric_log=man["metric_log"], seed=man["seed"],
            trained_groups=tuple(man["trained_groups"]),
        )
