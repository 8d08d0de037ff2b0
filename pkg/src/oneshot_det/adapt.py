"""One-shot test-time adaptation on a single target image."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import rotself
from .checkpoint import Checkpoint
from .detcore import Detection, Params, TrainingFault, detect, select, to_tensor
from .synthgen import AnnotatedImage, derive_seed

logger = logging.getLogger(__name__)


@dataclass
class AdaptConfig:
    gamma: int = 5
    inner_lr: float = 1e-3
    seed: int = 0
    # mean rotation loss over all four angles before and after adapting
    eval_rotation_loss: bool = False

    def validate(self) -> list[str]:
        errs = []
        if self.gamma < 0:
            errs.append("gamma must be >= 0")
        if self.inner_lr <= 0:
            errs.append("inner_lr must be > 0")
        return errs


@dataclass
class AdaptTrace:
    rot_loss: list[float] = field(default_factory=list)
    pseudo_boxes: list[tuple | None] = field(default_factory=list)
    qs: list[int] = field(default_factory=list)
    # four-angle mean rotation loss keyed by iteration count (eval_rotation_loss only)
    mean_loss_at: dict[int, float] = field(default_factory=dict)
    fault: str | None = None

    @property
    def initial_mean_loss(self) -> float | None:
        return self.mean_loss_at.get(0)

    @property
    def final_mean_loss(self) -> float | None:
        return self.mean_loss_at[max(self.mean_loss_at)] if self.mean_loss_at else None


@dataclass
class AdaptResult:
    theta_f: Params
    theta_r: Params
    trace: AdaptTrace


@dataclass
class ImageOutcome:
    image_id: str
    detections: list[Detection]
    trace: AdaptTrace
    seconds: float
    gamma: int
    snapshots: dict[int, list[Detection]] = field(default_factory=dict)


def _image_key(img, image_id: str | None) -> str:
    if image_id is not None:
        return image_id
    arr = np.ascontiguousarray(img.pixels if isinstance(img, AnnotatedImage) else img)
    return hashlib.sha256(arr.tobytes()).hexdigest()[:16]


def _pixels(img) -> np.ndarray:
    return img.pixels if isinstance(img, AnnotatedImage) else np.asarray(img)


def adapt_one(img, ckpt: Checkpoint, cfg: AdaptConfig, image_id: str | None = None,
              snapshot_at: Sequence[int] = ()) -> AdaptResult | tuple[AdaptResult, dict]:
    """Finetune copies of ``(theta_f, theta_r)`` on the rotation task of one image.

    Each of the ``cfg.gamma`` iterations recomputes the pseudo-box with the
    current copies, draws a rotation from a stream seeded by ``(cfg.seed,
    image id)`` and takes one SGD step on the rotation loss.  ``theta_d`` is
    read, never written.  Only ``img`` and ``ckpt`` are consulted.

    With ``snapshot_at``, also returns ``{gamma: theta_f}`` captured after
    that many iterations (a run to ``gamma`` yields the same prefix).  On a
    non-finite step the unadapted copies are returned with ``trace.fault``
    set, and snapshots past the fault are absent.
    """
    errs = cfg.validate()
    if errs:
        raise ValueError("; ".join(errs))
    ckpt.require_groups()
    arch = ckpt.arch
    base = ckpt.params
    dtype = next(iter(base.values())).dtype
    x = to_tensor(_pixels(img), dtype)
    theta_d = select(base, "theta_d")
    fast = {k: v.detach().clone().requires_grad_(True) for k, v in select(base, "theta_f", "theta_r").items()}
    rng = np.random.default_rng(derive_seed("adapt", cfg.seed, _image_key(img, image_id)))
    trace = AdaptTrace()
    snaps: dict[int, Params] = {}
    want = set(int(g) for g in snapshot_at)

    def mean_loss() -> float:
        merged = {k: v.detach() for k, v in {**theta_d, **fast}.items()}
        pb = rotself.pseudo_boxes(merged, x, arch)[0]
        return float(rotself.mean_rotation_loss(merged, x, [pb], arch)[0])

    def snapshot(step: int):
        if step in want:
            snaps[step] = {k: v.detach().clone() for k, v in fast.items() if k.startswith("f.")}
        if cfg.eval_rotation_loss and (step in want or step in (0, cfg.gamma)):
            trace.mean_loss_at[step] = mean_loss()

    snapshot(0)
    try:
        for step in range(cfg.gamma):
            merged = {**theta_d, **fast}
            pbox = rotself.pseudo_boxes({k: v.detach() for k, v in merged.items()}, x, arch)[0]
            q = int(rng.integers(4))
            loss = rotself.rotation_loss(merged, x, [pbox], [q], arch, source="pseudo")
            grads = torch.autograd.grad(loss, list(fast.values()))
            with torch.no_grad():
                for (k, v), g in zip(fast.items(), grads):
                    v.sub_(cfg.inner_lr * g)
            if not all(torch.isfinite(v).all() for v in fast.values()):
                raise TrainingFault(f"non-finite parameters after adaptation step {step}")
            trace.rot_loss.append(float(loss.detach()))
            trace.pseudo_boxes.append(pbox)
            trace.qs.append(q)
            snapshot(step + 1)
    except TrainingFault as exc:
        logger.warning("adaptation fault on %s: %s", _image_key(img, image_id), exc)
        trace.fault = str(exc)
        fast = {k: v.detach().clone() for k, v in select(base, "theta_f", "theta_r").items()}
        # snapshots taken before the fault stay valid; later ones are missing
    result = AdaptResult(
        theta_f={k: v.detach() for k, v in fast.items() if k.startswith("f.")},
        theta_r={k: v.detach() for k, v in fast.items() if k.startswith("r.")},
        trace=trace,
    )
    return (result, snaps) if snapshot_at else result


def predict(img, theta_f: Params | None, ckpt: Checkpoint) -> list[Detection]:
    """Detections from the adapted feature extractor and the original detection head."""
    params = dict(ckpt.params)
    if theta_f is not None:
        params.update(theta_f)
    dtype = next(iter(params.values())).dtype
    return detect(params, to_tensor(_pixels(img), dtype), ckpt.arch)[0]


def _run_one(img, ckpt: Checkpoint, cfg: AdaptConfig, snapshot_at: Sequence[int]) -> ImageOutcome:
    iid = img.id if isinstance(img, AnnotatedImage) else None
    t0 = time.perf_counter()
    gamma = max([cfg.gamma, *snapshot_at]) if snapshot_at else cfg.gamma
    run_cfg = AdaptConfig(gamma, cfg.inner_lr, cfg.seed, cfg.eval_rotation_loss)
    if snapshot_at:
        res, snaps = adapt_one(img, ckpt, run_cfg, image_id=iid, snapshot_at=sorted(set([cfg.gamma, *snapshot_at])))
        preds = {g: predict(img, tf, ckpt) for g, tf in snaps.items()}
        dets = preds[cfg.gamma] if cfg.gamma in preds else predict(img, res.theta_f, ckpt)
    else:
        res = adapt_one(img, ckpt, run_cfg, image_id=iid)
        preds = {}
        dets = predict(img, res.theta_f, ckpt)
    return ImageOutcome(iid or _image_key(img, None), dets, res.trace, time.perf_counter() - t0, cfg.gamma, preds)


def adapt_batch(images: Sequence, ckpt: Checkpoint, cfg: AdaptConfig, workers: int = 1,
                snapshot_at: Sequence[int] = ()) -> list[ImageOutcome]:
    """Adapt and predict every image independently from the original checkpoint.

    Results come back in input order and do not depend on ``workers`` or on
    the order of ``images``.  Faults are recorded per image in its trace.
    """
    ckpt.require_groups()
    if workers <= 1:
        return [_run_one(im, ckpt, cfg, snapshot_at) for im in images]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda im: _run_one(im, ckpt, cfg, snapshot_at), images))


def write_predictions(path: str | os.PathLike, outcomes: Sequence[ImageOutcome]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for o in outcomes:
            fh.write(json.dumps({
                "image_id": o.image_id,
                "detections": [d.to_dict() for d in o.detections],
                "gamma": o.gamma,
                "rot_loss_trace": o.trace.rot_loss,
                "fault": o.trace.fault,
            }, sort_keys=True) + "\n")
    return path


def read_predictions(path: str | os.PathLike) -> list[dict]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            rec["detections"] = [Detection.from_dict(d) for d in rec["detections"]]
            out.append(rec)
    return out
