"""Rotation head, box-restricted feature pooling and cross-task pseudo-labels."""
from __future__ import annotations

import contextlib
import logging
import math
import threading
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .detcore import DetectorArch, Detection, FeatureMap, TrainingFault, detect, features, to_tensor
from .synthgen import rotate, rotate_box

logger = logging.getLogger(__name__)

PSEUDO_LABEL_THRESH = 0.8
LN4 = math.log(4.0)

_events = threading.local()


@contextlib.contextmanager
def record_crops() -> Iterator[list[tuple[str, str]]]:
    """Collect ``(operation, box_source)`` events emitted while the block runs.

    Operations are ``"boxcrop"``, ``"pseudoboxcrop"`` and ``"fallback"``;
    box sources are ``"gt"``, ``"pseudo"`` or ``"full"``.
    """
    prev = getattr(_events, "log", None)
    log: list[tuple[str, str]] = []
    _events.log = log
    try:
        yield log
    finally:
        _events.log = prev


def _emit(op: str, source: str) -> None:
    log = getattr(_events, "log", None)
    if log is not None:
        log.append((op, source))


@dataclass(frozen=True)
class RotatedSample:
    image: np.ndarray
    q: int
    box_in_rotated_frame: tuple

    @property
    def alpha_deg(self) -> int:
        return 90 * self.q


def feature_cells(box: Sequence[float], stride: int, hf: int, wf: int) -> tuple[int, int, int, int]:
    """Feature-grid cell range ``(c1, r1, c2, r2)`` covered by an image-space box."""
    x1, y1, x2, y2 = box
    c1 = max(0, min(wf, math.floor(x1 / stride)))
    r1 = max(0, min(hf, math.floor(y1 / stride)))
    c2 = max(0, min(wf, math.ceil(x2 / stride)))
    r2 = max(0, min(hf, math.ceil(y2 / stride)))
    return c1, r1, c2, r2


def _pool(values: torch.Tensor, box, out_size: int, stride: int, source: str) -> torch.Tensor:
    if out_size < 1:
        raise ValueError("out_size must be >= 1")
    _, hf, wf = values.shape
    c1, r1, c2, r2 = feature_cells(box, stride, hf, wf)
    if c2 <= c1 or r2 <= r1:
        logger.warning("degenerate crop box %s on a %dx%d map; pooling full map", tuple(box), wf, hf)
        _emit("fallback", source)
        region = values
    else:
        region = values[:, r1:r2, c1:c2]
    return F.adaptive_avg_pool2d(region, out_size)


def _unpack(fmap, stride):
    if isinstance(fmap, FeatureMap):
        return fmap.values, fmap.stride
    if stride is None:
        raise ValueError("stride is required with a raw tensor")
    return fmap, stride


def boxcrop(fmap, box: Sequence[float], out_size: int = 5, stride: int | None = None,
            source: str = "gt") -> torch.Tensor:
    """Average-pool the feature cells under ``box`` to an ``out_size`` square.

    ``fmap`` is a :class:`FeatureMap` or a ``C x Hf x Wf`` tensor (then
    ``stride`` is required).  Returns ``C x s x s``.  A box that covers no cell
    after clamping falls back to pooling the whole map.
    """
    values, stride = _unpack(fmap, stride)
    _emit("boxcrop", source)
    return _pool(values, box, out_size, stride, source)


def pseudoboxcrop(fmap_q, pseudo_box: Sequence[float], q: int, out_size: int = 5,
                  stride: int | None = None, source: str = "pseudo") -> torch.Tensor:
    """Crop the feature map of ``rotate(img, q)`` at a box given in the unrotated frame.

    The frame size comes from ``fmap_q.source_dims`` (or the tensor shape
    times ``stride``), which describe the rotated image.
    """
    values, stride = _unpack(fmap_q, stride)
    hq, wq = values.shape[-2] * stride, values.shape[-1] * stride
    w, h = (hq, wq) if q % 2 else (wq, hq)
    _emit("pseudoboxcrop", source)
    try:
        box_q = rotate_box(pseudo_box, q, w, h)
    except ValueError:
        # empty or out-of-frame box: _pool sees no cells and falls back
        box_q = (0, 0, 0, 0)
    return _pool(values, box_q, out_size, stride, source)


def rotate_tensor(x: torch.Tensor, q: int) -> torch.Tensor:
    """Counter-clockwise quarter turns over the last two (H, W) axes."""
    if q not in (0, 1, 2, 3):
        raise ValueError(f"q must be in {{0,1,2,3}}, got {q!r}")
    return torch.rot90(x, q, dims=(-2, -1))


def rotation_logits(params, patches: torch.Tensor) -> torch.Tensor:
    return F.linear(patches.flatten(1), params["r.fc.w"], params["r.fc.b"])


def rotation_loss(params, images: torch.Tensor, boxes: Sequence[Sequence[float] | None], qs: Sequence[int],
                  arch: DetectorArch, source: str = "pseudo", return_logits: bool = False):
    """Cross-entropy of the rotation head on ``rotate(image, q)`` for a batch.

    ``boxes`` are in the unrotated frame; ``None`` means the full image.
    Ground-truth boxes (``source="gt"``) are recalibrated and fed to
    ``boxcrop``; anything else goes through ``pseudoboxcrop``.  Only the
    ``f.`` and ``r.`` parameters are read.
    """
    n, _, h, w = images.shape
    if len(boxes) != n or len(qs) != n:
        raise ValueError("need one box and one q per image")
    full = (0.0, 0.0, float(w), float(h))
    rotated = [rotate_tensor(images[i], int(qs[i])) for i in range(n)]
    if all(r.shape == rotated[0].shape for r in rotated):
        fm = features(params, torch.stack(rotated), arch)
        fmaps = [fm[i] for i in range(n)]
    else:
        fmaps = [features(params, r[None], arch)[0] for r in rotated]
    patches = []
    for i in range(n):
        b = full if boxes[i] is None else tuple(float(v) for v in boxes[i])
        src = "full" if boxes[i] is None else source
        q = int(qs[i])
        if src == "gt":
            patches.append(boxcrop(fmaps[i], rotate_box(b, q, w, h), arch.rot_pool, arch.stride, src))
        else:
            patches.append(pseudoboxcrop(fmaps[i], b, q, arch.rot_pool, arch.stride, src))
    logits = rotation_logits(params, torch.stack(patches))
    target = torch.as_tensor([int(q) for q in qs], dtype=torch.long)
    loss = F.cross_entropy(logits, target)
    if not torch.isfinite(loss):
        raise TrainingFault("non-finite rotation loss")
    return (loss, logits) if return_logits else loss


def pseudo_label(img, params, arch: DetectorArch = DetectorArch(),
                 thresh: float = PSEUDO_LABEL_THRESH) -> Detection | None:
    """Top-scoring detection on the unrotated image if it clears ``thresh``."""
    x = to_tensor(img, next(iter(params.values())).dtype)
    return pseudo_labels(params, x, arch, thresh)[0]


def pseudo_labels(params, images: torch.Tensor, arch: DetectorArch,
                  thresh: float = PSEUDO_LABEL_THRESH) -> list[Detection | None]:
    """Batched :func:`pseudo_label`; the class of the detection is carried but unused downstream."""
    with torch.no_grad():
        dets = detect(params, images, arch, score_thresh=thresh)
    return [max(d, key=lambda t: t.score) if d else None for d in dets]


def pseudo_boxes(params, images: torch.Tensor, arch: DetectorArch,
                 thresh: float = PSEUDO_LABEL_THRESH) -> list[tuple | None]:
    return [None if d is None else d.box for d in pseudo_labels(params, images, arch, thresh)]


def make_rotated_sample(img: np.ndarray, box: Sequence[float], q: int) -> RotatedSample:
    h, w = img.shape[:2]
    return RotatedSample(rotate(img, q), q, rotate_box(box, q, w, h))


def rotation_accuracy(params, images: torch.Tensor, boxes: Sequence[Sequence[float] | None],
                      arch: DetectorArch) -> float:
    """Fraction of correct 4-way predictions over all four rotations of each image."""
    correct = total = 0
    with torch.no_grad():
        for q in range(4):
            _, logits = rotation_loss(params, images, boxes, [q] * images.shape[0], arch,
                                      source="eval", return_logits=True)
            correct += int((logits.argmax(1) == q).sum())
            total += images.shape[0]
    return correct / max(total, 1)


def mean_rotation_loss(params, images: torch.Tensor, boxes: Sequence[Sequence[float] | None],
                       arch: DetectorArch) -> torch.Tensor:
    """Rotation loss averaged over all four angles, per image: shape ``(N,)``."""
    out = []
    with torch.no_grad():
        for q in range(4):
            _, logits = rotation_loss(params, images, boxes, [q] * images.shape[0], arch,
                                      source="eval", return_logits=True)
            out.append(F.cross_entropy(logits, torch.full((images.shape[0],), q), reduction="none"))
    return torch.stack(out).mean(0)
