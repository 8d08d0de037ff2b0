"""Source-side training: multi-task pretraining and meta-learning pretraining."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from typing import Callable, Sequence

import numpy as np
import torch

from . import rotself
from .checkpoint import Checkpoint
from .detcore import (
    DetectorArch,
    Params,
    TrainingFault,
    detection_loss,
    init_params,
    select,
    targets_from,
    to_tensor,
)
from .synthgen import AUGMENT_KINDS, AnnotatedImage, augment, derive_seed

logger = logging.getLogger(__name__)

VARIANTS = ("baseline", "tran-baseline", "oshot", "tran-oshot", "meta-oshot", "full-oshot")
META_VARIANTS = ("meta-oshot", "full-oshot")
ROTATION_VARIANTS = ("oshot", "tran-oshot", "meta-oshot", "full-oshot")


@dataclass
class TrainConfig:
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
    meta_images: int = 0  # 0 means the whole source set
    seed: int = 0
    meta_grad_mode: str = "exact"

    def __post_init__(self):
        if self.variant == "meta-oshot":
            self.K = 1

    def validate(self) -> list[str]:
        """All problems with this config, empty when valid."""
        errs = []
        if self.variant not in VARIANTS:
            errs.append(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.K < 1:
            errs.append("K must be >= 1")
        if self.K > len(AUGMENT_KINDS):
            errs.append(f"K must be <= {len(AUGMENT_KINDS)} (augmentations are drawn without replacement)")
        if self.variant in META_VARIANTS and self.eta < 1:
            errs.append("eta must be >= 1 for meta variants")
        if self.lambda_rot < 0:
            errs.append("lambda must be >= 0")
        if self.meta_grad_mode not in ("exact", "first-order"):
            errs.append("meta_grad_mode must be 'exact' or 'first-order'")
        for name in ("inner_lr", "outer_lr", "lr"):
            if getattr(self, name) <= 0:
                errs.append(f"{name} must be > 0")
        if self.epochs < 0 or self.meta_epochs < 0:
            errs.append("epochs must be >= 0")
        if self.batch_size < 1:
            errs.append("batch_size must be >= 1")
        return errs

    @property
    def trains_rotation(self) -> bool:
        return self.variant in ROTATION_VARIANTS

    @property
    def uses_augmentation(self) -> bool:
        return self.variant.startswith("tran-") or self.variant == "full-oshot"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _rng(seed: int, stream: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, stream))


def _torch_gen(seed: int, stream: str) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(seed, stream) & 0x7FFFFFFFFFFFFFFF)


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, size):
        yield order[i:i + size]


# ---------------------------------------------------------------------------
# multi-task pretraining


def pretrain_multitask(source: Sequence[AnnotatedImage], cfg: TrainConfig, arch: DetectorArch = DetectorArch(),
                       val: Sequence[AnnotatedImage] | None = None,
                       evaluate: Callable[[Params], float] | None = None) -> Checkpoint:
    """Jointly minimise detection loss plus ``lambda`` times rotation loss.

    Baseline variants skip the rotation branch entirely; their rotation head
    keeps its initial values.  ``tran-`` variants train on a randomly chosen
    semantic-preserving augmentation of each image.  ``evaluate`` (if given)
    maps parameters to a validation mAP recorded in each epoch's log row.
    """
    errs = cfg.validate()
    if errs:
        raise ValueError("; ".join(errs))
    params = init_params(arch, _torch_gen(cfg.seed, "init"))
    for v in params.values():
        v.requires_grad_(True)
    train_rot = cfg.variant in ROTATION_VARIANTS
    opt_params = list(select(params, "theta_f", "theta_d", "theta_r").values()) if train_rot else \
        list(select(params, "theta_f", "theta_d").values())
    opt = torch.optim.Adam(opt_params, lr=cfg.lr)

    data_rng = _rng(cfg.seed, "data")
    aug_rng = _rng(cfg.seed, "augmentation")
    rot_rng = _rng(cfg.seed, "rotation-draw")
    sampler = _torch_gen(cfg.seed, "sampling")
    log: list[dict] = []
    good = {k: v.detach().clone() for k, v in params.items()}

    for epoch in range(cfg.epochs):
        sums = {"L_d": 0.0, "L_r": 0.0}
        steps = 0
        for idx in _batches(len(source), cfg.batch_size, data_rng):
            batch = [source[i] for i in idx]
            if cfg.variant.startswith("tran-"):
                kinds = aug_rng.choice(AUGMENT_KINDS, size=len(batch))
                seeds = aug_rng.integers(0, 2**63 - 1, size=len(batch))
                batch = [augment(im, str(k), int(s)) for im, k, s in zip(batch, kinds, seeds)]
            x = to_tensor([im.pixels for im in batch])
            try:
                l_d, _ = detection_loss(params, x, targets_from(batch), arch, sampler)
                loss = l_d
                l_r = torch.zeros(())
                if train_rot:
                    boxes = []
                    for im in batch:
                        boxes.append(im.labels[int(rot_rng.integers(len(im.labels)))].box if im.labels else None)
                    qs = rot_rng.integers(0, 4, size=len(batch)).tolist()
                    l_r = rotself.rotation_loss(params, x, boxes, qs, arch, source="gt")
                    loss = l_d + cfg.lambda_rot * l_r
            except TrainingFault:
                logger.error("training diverged at epoch %d; keeping last good parameters", epoch)
                params = {k: v.clone() for k, v in good.items()}
                raise
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sums["L_d"] += float(l_d.detach())
            sums["L_r"] += float(l_r.detach())
            steps += 1
        good = {k: v.detach().clone() for k, v in params.items()}
        row = {"epoch": epoch + 1, "split": "train", "L_d": sums["L_d"] / max(steps, 1),
               "L_r": sums["L_r"] / max(steps, 1) if train_rot else None,
               "mAP": float(evaluate(params)) if evaluate is not None else None}
        log.append(row)
        logger.info("epoch %d  L_d %.4f  L_r %s  mAP %s", row["epoch"], row["L_d"], row["L_r"], row["mAP"])

    trained = ("theta_f", "theta_d", "theta_r") if train_rot else ("theta_f", "theta_d")
    return Checkpoint(
        params={k: v.detach().clone() for k, v in params.items()}, config=cfg.to_dict(), arch=arch,
        epoch=cfg.epochs, metric_log=log, seed=cfg.seed, trained_groups=trained,
    )


# ---------------------------------------------------------------------------
# meta-learning pretraining


def inner_adapt(params: Params, image: torch.Tensor, qs: Sequence[int], inner_lr: float, arch: DetectorArch,
                create_graph: bool, first_order: bool = False, trace: list | None = None) -> Params:
    """Run ``len(qs)`` rotation-loss gradient steps on copies of ``(theta_f, theta_r)``.

    ``params`` must contain all three groups.  The pseudo-box is recomputed
    from the current copies before every step.  With ``create_graph`` the
    returned tensors stay differentiable functions of the inputs (exact
    meta-gradient); with ``first_order`` each step's update is detached so
    the copies depend on the originals through the identity only.
    """
    theta_d = select(params, "theta_d")
    fast = {n: v if v.requires_grad else v.detach().requires_grad_(True)
            for n, v in select(params, "theta_f", "theta_r").items()}
    names = list(fast)
    with torch.enable_grad():
        for q in qs:
            merged = {**theta_d, **fast}
            pbox = rotself.pseudo_boxes({k: v.detach() for k, v in merged.items()}, image, arch)[0]
            l_r = rotself.rotation_loss(merged, image, [pbox], [int(q)], arch, source="pseudo")
            grads = torch.autograd.grad(l_r, [fast[n] for n in names], create_graph=create_graph)
            if first_order:
                fast = {n: fast[n] - inner_lr * g.detach() for n, g in zip(names, grads)}
            else:
                fast = {n: fast[n] - inner_lr * g for n, g in zip(names, grads)}
            if trace is not None:
                trace.append((float(l_r.detach()), pbox))
    return fast


def meta_objective(params: Params, episodes: Sequence[torch.Tensor], target: tuple[torch.Tensor, torch.Tensor],
                   q_schedule: Sequence[Sequence[int]], inner_lr: float, arch: DetectorArch,
                   mode: str = "exact", generator: torch.Generator | None = None) -> torch.Tensor:
    """Outer loss ``(1/K) sum_k L_d(x_k; theta'_f, theta_d)`` for one source image.

    ``episodes`` are the K augmented copies (each ``1 x 3 x H x W``) and
    ``q_schedule[k]`` lists the rotation drawn at each inner step of episode k
    (its length is the number of inner steps).
    """
    if mode not in ("exact", "first-order"):
        raise ValueError(f"unknown meta_grad_mode {mode!r}")
    theta_d = select(params, "theta_d")
    losses = []
    for xk, qs in zip(episodes, q_schedule):
        fast = inner_adapt(params, xk, qs, inner_lr, arch, create_graph=(mode == "exact"),
                           first_order=(mode == "first-order"))
        l_k, _ = detection_loss({**theta_d, **fast}, xk, [target], arch, generator)
        losses.append(l_k)
    return torch.stack(losses).mean()


def make_episodes(img: AnnotatedImage, K: int, rng: np.random.Generator,
                  kinds: Sequence[str] | None = None) -> tuple[list[str], list[AnnotatedImage]]:
    """K augmentations with distinct kinds drawn without replacement from the catalogue."""
    if kinds is None:
        kinds = [str(k) for k in rng.choice(AUGMENT_KINDS, size=K, replace=False)]
    seeds = rng.integers(0, 2**63 - 1, size=len(kinds))
    return list(kinds), [augment(img, k, int(s)) for k, s in zip(kinds, seeds)]


def meta_pretrain(source: Sequence[AnnotatedImage], cfg: TrainConfig, init: Checkpoint,
                  arch: DetectorArch | None = None,
                  evaluate: Callable[[Params], float] | None = None,
                  on_step: Callable[[str, Params], None] | None = None) -> Checkpoint:
    """Bi-level meta-training over the source images, warm-started from ``init``.

    Each image contributes one outer step on ``(theta_f, theta_d)``.  The
    persistent rotation head is frozen: inner copies train it transiently and
    are discarded.  Meta-OSHOT uses one identity episode per image; FULL uses
    K distinct augmentations.
    """
    errs = cfg.validate()
    if errs:
        raise ValueError("; ".join(errs))
    if cfg.variant not in META_VARIANTS:
        raise ValueError(f"meta_pretrain needs a meta variant, got {cfg.variant!r}")
    init.require_groups()
    arch = arch or init.arch
    params = {k: v.detach().clone().requires_grad_(True) for k, v in init.params.items()}
    opt = torch.optim.Adam(list(select(params, "theta_f", "theta_d").values()), lr=cfg.outer_lr)
    data_rng = _rng(cfg.seed, "meta-data")
    aug_rng = _rng(cfg.seed, "meta-augmentation")
    rot_rng = _rng(cfg.seed, "meta-rotation-draw")
    sampler = _torch_gen(cfg.seed, "meta-sampling")
    n_img = len(source) if cfg.meta_images <= 0 else min(cfg.meta_images, len(source))
    log = list(init.metric_log)
    start_epoch = init.epoch

    for epoch in range(cfg.meta_epochs):
        outer_sum = 0.0
        order = data_rng.permutation(len(source))[:n_img]
        for i in order:
            img = source[int(i)]
            if cfg.variant == "meta-oshot":
                kinds, eps = make_episodes(img, 1, aug_rng, kinds=["identity"])
            else:
                kinds, eps = make_episodes(img, cfg.K, aug_rng)
            episodes = [to_tensor(e.pixels) for e in eps]
            q_schedule = rot_rng.integers(0, 4, size=(len(episodes), cfg.eta)).tolist()
            target = targets_from([img])[0]
            if on_step is not None:
                on_step("start", params)
            try:
                outer = meta_objective(params, episodes, target, q_schedule, cfg.inner_lr, arch,
                                       cfg.meta_grad_mode, sampler)
                opt.zero_grad(set_to_none=True)
                if on_step is not None:
                    on_step("before-outer", params)
                outer.backward()
            except MemoryError as e:
                raise MemoryError(f"{e}; meta_grad_mode='first-order' needs far less memory") from e
            except RuntimeError as e:
                if "out of memory" in str(e).lower():
                    raise MemoryError(f"{e}; meta_grad_mode='first-order' needs far less memory") from e
                raise
            opt.step()
            if on_step is not None:
                on_step("after-outer", params)
            outer_sum += float(outer.detach())
        row = {"epoch": start_epoch + epoch + 1, "split": "meta", "L_d": outer_sum / max(n_img, 1),
               "L_r": None, "mAP": float(evaluate(params)) if evaluate is not None else None}
        log.append(row)
        logger.info("meta epoch %d  outer L_d %.4f  mAP %s", row["epoch"], row["L_d"], row["mAP"])

    config = dict(init.config)
    config.update({f"meta.{k}": v for k, v in cfg.to_dict().items()})
    config["variant"] = cfg.variant
    return Checkpoint(
        params={k: v.detach().clone() for k, v in params.items()}, config=config, arch=arch,
        epoch=start_epoch + cfg.meta_epochs, metric_log=log, seed=cfg.seed,
        trained_groups=init.trained_groups,
    )
