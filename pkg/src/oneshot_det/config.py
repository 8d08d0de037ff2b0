"""Flat ``key = value`` run configuration with ``--key value`` overrides."""
from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from .adapt import AdaptConfig
from .detcore import MINI_ARCH, DetectorArch
from .evalkit import CURVE_GAMMAS
from .synthgen import DOMAIN_CATALOGUE, ConfigError, SceneSpec
from .train import TrainConfig

# named detector sizes; the class count always follows ``num_classes``
ARCHS = {"default": DetectorArch(), "mini": MINI_ARCH}


@dataclass
class RunConfig:
    """Every knob of a benchmark run in one flat namespace.

    Scene, training and adaptation fields keep the names of
    :class:`SceneSpec` and :class:`TrainConfig`; ``adapt_lr`` of None means
    "use ``inner_lr``".
    """

    # data
    image_size: int = 96
    min_objects: int = 1
    max_objects: int = 4
    num_classes: int = 5
    background_style: str = "gradient"
    cue_strength: float = 0.5
    min_object_size: int = 16
    max_object_size: int = 36
    n_train: int = 1000
    n_val: int = 100
    n_target: int = 100
    domains: tuple = ("fog", "clipart", "noisy")
    # training
    arch: str = "default"
    variant: str = "oshot"
    lambda_rot: float = 0.05
    K: int = 4
    eta: int = 5
    inner_lr: float = 1e-3
    outer_lr: float = 1e-4
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 16
    meta_epochs: int = 1
    meta_images: int = 0
    meta_grad_mode: str = "exact"
    warm_start: str = ""
    # adaptation and evaluation
    gamma: int = 5
    adapt_lr: typing.Optional[float] = None
    gamma_list: tuple = CURVE_GAMMAS
    workers: int = 1
    seed: int = 0

    def scene_spec(self) -> SceneSpec:
        names = {f.name for f in fields(SceneSpec)}
        return SceneSpec(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def detector_arch(self) -> DetectorArch:
        return dataclasses.replace(ARCHS[self.arch], num_classes=self.num_classes)

    def adapt_config(self, gamma: int | None = None) -> AdaptConfig:
        lr = self.inner_lr if self.adapt_lr is None else self.adapt_lr
        return AdaptConfig(gamma=self.gamma if gamma is None else gamma, inner_lr=lr, seed=self.seed)

    def validate(self) -> list[str]:
        """Every problem found, not just the first."""
        errs = []
        try:
            self.scene_spec().validate()
        except ConfigError as e:
            errs.append(str(e))
        errs += self.train_config().validate()
        if self.arch not in ARCHS:
            errs.append(f"unknown arch {self.arch!r}; choose from {sorted(ARCHS)}")
        elif self.image_size % ARCHS[self.arch].stride:
            errs.append(f"image_size must be a multiple of the {self.arch} detector stride {ARCHS[self.arch].stride}")
        errs += self.adapt_config().validate()
        if not 1 <= len(self.domains) <= 8:
            errs.append("domains must list between 1 and 8 target domains")
        for d in self.domains:
            if d not in DOMAIN_CATALOGUE:
                errs.append(f"unknown domain {d!r}; choose from {sorted(DOMAIN_CATALOGUE)}")
        if len(set(self.domains)) != len(self.domains):
            errs.append("domains must be distinct")
        for name in ("n_train", "n_val", "n_target"):
            if getattr(self, name) < 1:
                errs.append(f"{name} must be >= 1")
        g = list(self.gamma_list)
        if not g or g != sorted(set(g)) or g[0] != 0:
            errs.append("gamma_list must be strictly ascending and start at 0")
        if self.workers < 1:
            errs.append("workers must be >= 1")
        return errs

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {'' if v is None else v}")
        return "\n".join(lines) + "\n"


def _coerce(name: str, raw: str, hint):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union and type(None) in args:
        if raw.strip().lower() in ("", "none"):
            return None
        hint = next(a for a in args if a is not type(None))
    try:
        if hint is bool:
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is tuple:
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return tuple(int(s) if s.lstrip("-").isdigit() else s for s in items)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {getattr(hint, '__name__', hint)}") from None


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw ``key -> value`` strings; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def parse_overrides(args: list[str]) -> dict[str, str]:
    """``--key value`` and ``--key=value`` pairs; dashes in keys become underscores."""
    out = {}
    i = 0
    while i < len(args):
        a = args[i]
        if not a.startswith("--"):
            raise ConfigError(f"unexpected argument {a!r}")
        key = a[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(args):
                raise ConfigError(f"missing value for {a}")
            val = args[i + 1]
            i += 2
        out[key.replace("-", "_")] = val
    return out


def build(raw: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    """Apply raw string values onto ``base``; unknown keys are errors."""
    base = base or RunConfig()
    hints = typing.get_type_hints(RunConfig)
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = {k: _coerce(k, v, hints[k]) for k, v in raw.items()}
    return dataclasses.replace(base, **values)


def load(path: str | os.PathLike | None = None, overrides: list[str] | dict[str, str] | None = None) -> RunConfig:
    """Defaults, then the file at ``path`` (if any), then ``overrides``."""
    raw: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file {p} not found")
        raw.update(parse_text(p.read_text(), str(p)))
    if overrides:
        raw.update(overrides if isinstance(overrides, dict) else parse_overrides(overrides))
    return build(raw)
