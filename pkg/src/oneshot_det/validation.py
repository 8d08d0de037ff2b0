"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .synthgen import AnnotatedImage, BoxLabel


def check_image(img, stride: int = 8, name: str = "image") -> np.ndarray:
    """Return ``img`` as an ``H x W x 3`` float32 array in [0, 1].

    Accepts an :class:`AnnotatedImage`, a float array in [0, 1] or a uint8
    array (scaled by 1/255).  Both sides must be multiples of ``stride``.
    """
    arr = img.pixels if isinstance(img, AnnotatedImage) else np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    elif not np.issubdtype(arr.dtype, np.floating):
        raise ValueError(f"{name} must be uint8 or floating point, got {arr.dtype}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    h, w = arr.shape[:2]
    if h % stride or w % stride or h == 0 or w == 0:
        raise ValueError(f"{name} sides {h}x{w} must be positive multiples of {stride}")
    return arr.astype(np.float32, copy=False)


def check_box(box: Sequence[float], name: str = "box") -> tuple[float, float, float, float]:
    if len(box) != 4:
        raise ValueError(f"{name} must have 4 coordinates, got {len(box)}")
    x1, y1, x2, y2 = (float(v) for v in box)
    if not all(np.isfinite([x1, y1, x2, y2])):
        raise ValueError(f"{name} has non-finite coordinates")
    if x2 <= x1 or y2 <= y1:
        raise ValueError(f"{name} {box} must satisfy x1 < x2 and y1 < y2")
    return x1, y1, x2, y2


def check_labels(labels, num_classes: int, name: str = "labels") -> list[BoxLabel]:
    """Normalise ``labels`` (BoxLabels or ``(class_id, box)`` pairs) to BoxLabels."""
    out = []
    for k, lb in enumerate(labels):
        if isinstance(lb, BoxLabel):
            cls, box = lb.class_id, lb.box
        else:
            cls, box = lb
        if not 0 <= int(cls) < num_classes:
            raise ValueError(f"{name}[{k}] class {cls} outside [0, {num_classes})")
        out.append(BoxLabel(int(cls), *check_box(box, f"{name}[{k}] box")))
    return out


def check_dataset(X, y=None, num_classes: int | None = None, stride: int = 8,
                  require_labels: bool = False) -> list[AnnotatedImage]:
    """Turn ``X`` (and optional ``y``) into a list of :class:`AnnotatedImage`.

    ``X`` holds AnnotatedImages or raw arrays; ``y`` (if given) holds one
    label list per image and overrides labels carried by ``X``.
    """
    if isinstance(X, (AnnotatedImage, np.ndarray)) and getattr(X, "ndim", 4) != 4:
        X = [X]
    X = list(X)
    if not X:
        raise ValueError("need at least one image")
    if y is not None and len(y) != len(X):
        raise ValueError(f"got {len(X)} images but {len(y)} label lists")
    out = []
    for i, item in enumerate(X):
        px = check_image(item, stride, f"X[{i}]")
        if y is not None:
            labels = y[i]
        elif isinstance(item, AnnotatedImage):
            labels = item.labels
        else:
            labels = []
        if num_classes is not None:
            labels = check_labels(labels, num_classes, f"y[{i}]")
        domain = item.domain if isinstance(item, AnnotatedImage) else "unknown"
        iid = item.id if isinstance(item, AnnotatedImage) else f"X-{i:05d}"
        out.append(AnnotatedImage(px, list(labels), domain, iid))
    if require_labels and not any(im.labels for im in out):
        raise ValueError("training needs at least one labelled object")
    return out
