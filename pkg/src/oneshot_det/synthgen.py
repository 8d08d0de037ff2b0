"""Procedural detection scenes, domain shifts, rotation and augmentation.

Scenes are flat-shaded geometric shapes on an orientation-cued background.
Boxes are absolute pixel coordinates, half-open ``[x1, x2) x [y1, y2)``.
All pixel arrays are ``float32`` in ``[0, 1]`` and quantized to multiples of
1/255 so that a PNG round trip is exact.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

CLASS_NAMES = ("circle", "triangle", "square", "cross", "arrow")
AUGMENT_KINDS = ("grayscale", "color-jitter", "brightness", "contrast", "identity")
TRANSFORM_NAMES = ("palette", "texture", "fog", "edge", "noise")
# Full-scale detectors resize the shorter side to this; scenes here default to 96.
FULL_SCALE_SHORT_SIDE = 600


class ConfigError(ValueError):
    """Invalid generator or domain configuration."""


@dataclass(frozen=True)
class BoxLabel:
    class_id: int
    x1: int
    y1: int
    x2: int
    y2: int

    @property
    def box(self) -> tuple[int, int, int, int]:
        return (self.x1, self.y1, self.x2, self.y2)

    def to_dict(self) -> dict:
        return {"class": self.class_id, "x1": self.x1, "y1": self.y1, "x2": self.x2, "y2": self.y2}

    @classmethod
    def from_dict(cls, d: dict) -> "BoxLabel":
        return cls(int(d["class"]), int(d["x1"]), int(d["y1"]), int(d["x2"]), int(d["y2"]))


@dataclass
class AnnotatedImage:
    pixels: np.ndarray
    labels: list[BoxLabel]
    domain: str = "source"
    id: str = ""

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    def boxes(self) -> np.ndarray:
        return np.array([lb.box for lb in self.labels], dtype=np.float64).reshape(-1, 4)

    def classes(self) -> np.ndarray:
        return np.array([lb.class_id for lb in self.labels], dtype=np.int64)


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 96
    min_objects: int = 1
    max_objects: int = 4
    num_classes: int = 5
    background_style: str = "gradient"
    cue_strength: float = 0.5
    min_object_size: int = 16
    max_object_size: int = 36
    stride: int = 8

    def validate(self) -> None:
        if self.image_size % self.stride:
            raise ConfigError(f"image_size {self.image_size} is not a multiple of stride {self.stride}")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigError("need 1 <= min_objects <= max_objects")
        if not 1 <= self.num_classes <= len(CLASS_NAMES):
            raise ConfigError(f"num_classes must be in [1, {len(CLASS_NAMES)}]")
        if self.background_style not in ("gradient", "ground-strip"):
            raise ConfigError(f"unknown background_style {self.background_style!r}")
        if not 0.0 < self.cue_strength <= 1.0:
            raise ConfigError("cue_strength must be in (0, 1]")
        if not 4 <= self.min_object_size <= self.max_object_size < self.image_size:
            raise ConfigError("object size range does not fit the image")


@dataclass(frozen=True)
class DomainSpec:
    """A named chain of pixel-level shifts; the empty chain is the source domain."""

    name: str
    transform_chain: tuple[tuple[str, dict], ...] = ()

    def validate(self) -> None:
        for tname, _ in self.transform_chain:
            if tname not in TRANSFORM_NAMES:
                raise ConfigError(f"unknown transform {tname!r}; expected one of {TRANSFORM_NAMES}")

    def to_dict(self) -> dict:
        return {"name": self.name, "transform_chain": [[n, dict(p)] for n, p in self.transform_chain]}

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        return cls(d["name"], tuple((n, dict(p)) for n, p in d["transform_chain"]))


SOURCE_DOMAIN = DomainSpec("source")

DEFAULT_TARGET_DOMAINS = (
    DomainSpec("fog", (("fog", {"density": 0.65}),)),
    DomainSpec("clipart", (("palette", {"hue_shift": 150.0, "saturation": 1.6}), ("edge", {"strength": 0.8}))),
    DomainSpec("noisy", (("texture", {"amplitude": 0.3, "period": 4}), ("noise", {"sigma": 0.15}))),
)

# named targets a run configuration can pick from
DOMAIN_CATALOGUE = {d.name: d for d in DEFAULT_TARGET_DOMAINS + (
    DomainSpec("heavyfog", (("fog", {"density": 0.9}),)),
    DomainSpec("lightfog", (("fog", {"density": 0.35}),)),
    DomainSpec("palette", (("palette", {"hue_shift": 90.0}),)),
    DomainSpec("sketch", (("edge", {"strength": 1.0, "levels": 2}),)),
    DomainSpec("heavynoise", (("noise", {"sigma": 0.25}),)),
    DomainSpec("lightnoise", (("texture", {"amplitude": 0.18, "period": 6}), ("noise", {"sigma": 0.1}))),
    DomainSpec("foggyclipart", (("palette", {"hue_shift": 150.0, "saturation": 1.6}), ("fog", {"density": 0.5}))),
)}


def quantize(pixels: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(pixels, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from arbitrary printable parts."""
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


# ---------------------------------------------------------------------------
# scene rendering


def _shape_mask(class_name: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    # u points right, v points down; both span [-1, 1] over the object box.
    if class_name == "circle":
        return u * u + v * v <= 1.0
    if class_name == "triangle":
        return (v >= -1.0) & (v <= 1.0) & (np.abs(u) <= (v + 1.0) / 2.0)
    if class_name == "square":
        return (np.abs(u) <= 0.9) & (np.abs(v) <= 0.9)
    if class_name == "cross":
        vertical = (np.abs(u) <= 0.28) & (np.abs(v) <= 1.0)
        arm = (np.abs(u) <= 1.0) & (v >= -0.6) & (v <= -0.15)
        return vertical | arm
    if class_name == "arrow":
        head = (v >= -1.0) & (v <= 0.0) & (np.abs(u) <= (v + 1.0))
        shaft = (np.abs(u) <= 0.35) & (v > 0.0) & (v <= 1.0)
        return head | shaft
    raise ConfigError(f"unknown shape {class_name!r}")


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.image_size
    rows = (np.arange(n, dtype=np.float64) + 0.5) / n
    base = rng.uniform(0.35, 0.65, size=3)
    tint = rng.uniform(-0.12, 0.12, size=3)
    if spec.background_style == "gradient":
        # bright sky at the top fading to a darker bottom
        ramp = 0.5 - rows
        col = base[None, :] + tint[None, :] * rows[:, None] + spec.cue_strength * ramp[:, None]
        img = np.repeat(col[:, None, :], n, axis=1)
    else:
        img = np.broadcast_to(base + 0.15 * spec.cue_strength, (n, n, 3)).copy()
        strip = int(rng.integers(n // 6, n // 4 + 1))
        ground = base - 0.3 * spec.cue_strength + tint
        img[n - strip:] = ground
    img = img + rng.normal(0.0, 0.015, size=(n, n, 1))
    return img


def _overlap(a: tuple, b: tuple) -> float:
    ix = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter == 0:
        return 0.0
    small = min((a[2] - a[0]) * (a[3] - a[1]), (b[2] - b[0]) * (b[3] - b[1]))
    return inter / small


def _place(spec: SceneSpec, rng: np.random.Generator, placed: list, w: int, h: int) -> tuple:
    best, best_ov = None, np.inf
    n = spec.image_size
    for _ in range(100):
        x1 = int(rng.integers(1, n - w))
        y1 = int(rng.integers(1, n - h))
        cand = (x1, y1, x1 + w, y1 + h)
        # one pixel margin keeps neighbouring boxes from touching
        grown = (x1 - 1, y1 - 1, x1 + w + 1, y1 + h + 1)
        ov = max((_overlap(grown, p) for p in placed), default=0.0)
        if ov == 0.0:
            return cand
        if ov < best_ov:
            best, best_ov = cand, ov
    if best_ov > 0.5:
        raise ConfigError(
            f"could not place object without >50% overlap after 100 attempts (best {best_ov:.2f}); spec too dense"
        )
    return best


def generate_scene(spec: SceneSpec, seed: int, *, domain: str = "source", image_id: str | None = None) -> AnnotatedImage:
    """Render one scene; deterministic in ``(spec, seed)``."""
    spec.validate()
    rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)
    n = spec.image_size
    img = _background(spec, rng)
    num = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    placed: list[tuple] = []
    labels: list[BoxLabel] = []
    ys, xs = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5
    # stratified classes: consecutive seeds rotate the starting class so
    # frequencies stay balanced even over a hundred draws
    offset = int(seed) % spec.num_classes
    for k in range(num):
        cls = (offset + k) % spec.num_classes
        size = int(rng.integers(spec.min_object_size, spec.max_object_size + 1))
        aspect = float(rng.uniform(0.8, 1.25))
        w = int(np.clip(round(size * np.sqrt(aspect)), 4, n - 3))
        h = int(np.clip(round(size / np.sqrt(aspect)), 4, n - 3))
        x1, y1, x2, y2 = _place(spec, rng, placed, w, h)
        u = (xs - x1) / w * 2.0 - 1.0
        v = (ys - y1) / h * 2.0 - 1.0
        mask = _shape_mask(CLASS_NAMES[cls], u, v)
        mask &= (u >= -1.0) & (u <= 1.0) & (v >= -1.0) & (v <= 1.0)
        color = rng.uniform(0.0, 1.0, size=3)
        color[rng.integers(3)] = rng.choice([0.05, 0.95])
        # lit from above: shading darkens toward the bottom of the object
        shade = 1.15 - 0.9 * spec.cue_strength * (v + 1.0) / 2.0
        obj = np.clip(color[None, None, :] * shade[..., None], 0.0, 1.0)
        img = np.where(mask[..., None], obj, img)
        rr, cc = np.nonzero(mask)
        box = (int(cc.min()), int(rr.min()), int(cc.max()) + 1, int(rr.max()) + 1)
        placed.append(box)
        labels.append(BoxLabel(cls, *box))
    iid = image_id if image_id is not None else f"{domain}-{int(seed) & 0xFFFFFFFFFFFFFFFF:016x}"
    return AnnotatedImage(quantize(img), labels, domain, iid)


# ---------------------------------------------------------------------------
# domain shifts


def _hue_matrix(degrees: float) -> np.ndarray:
    # rotation about the grey axis in RGB space
    t = np.deg2rad(degrees)
    c, s = np.cos(t), np.sin(t)
    k = np.ones((3, 3)) / 3.0
    skew = np.array([[0, -1, 1], [1, 0, -1], [-1, 1, 0]]) / np.sqrt(3.0)
    return c * np.eye(3) + (1 - c) * k + s * skew


def _smooth_field(rng: np.random.Generator, h: int, w: int, cells: int = 4) -> np.ndarray:
    coarse = rng.uniform(0.0, 1.0, size=(cells + 1, cells + 1))
    yy = np.linspace(0, cells, h)
    xx = np.linspace(0, cells, w)
    y0 = np.minimum(yy.astype(int), cells - 1)
    x0 = np.minimum(xx.astype(int), cells - 1)
    fy = (yy - y0)[:, None]
    fx = (xx - x0)[None, :]
    a = coarse[y0][:, x0]
    b = coarse[y0][:, x0 + 1]
    c = coarse[y0 + 1][:, x0]
    d = coarse[y0 + 1][:, x0 + 1]
    return a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx


def _palette(x, rng, hue_shift=120.0, saturation=1.0):
    out = x @ _hue_matrix(hue_shift).T
    grey = out.mean(axis=2, keepdims=True)
    return grey + saturation * (out - grey)


def _texture(x, rng, amplitude=0.15, period=6):
    h, w = x.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    phase = rng.uniform(0, 2 * np.pi)
    stripes = np.sin(2 * np.pi * (xx + yy) / float(period) + phase)
    return x + amplitude * stripes[..., None]


def _fog(x, rng, density=0.5, color=(0.85, 0.85, 0.88)):
    if not 0.0 <= density <= 1.0:
        raise ConfigError("fog density must lie in [0, 1]")
    h, w = x.shape[:2]
    t = density * (0.55 + 0.3 * _smooth_field(rng, h, w))
    return x * (1.0 - t[..., None]) + np.asarray(color)[None, None, :] * t[..., None]


def _edge(x, rng, strength=0.7, levels=3):
    if not 0.0 <= strength <= 1.0:
        raise ConfigError("edge strength must lie in [0, 1]")
    post = np.round(x * (levels - 1)) / (levels - 1)
    lum = x.mean(axis=2)
    gy = np.abs(np.diff(lum, axis=0, append=lum[-1:]))
    gx = np.abs(np.diff(lum, axis=1, append=lum[:, -1:]))
    edges = np.clip((gx + gy) * 6.0, 0.0, 1.0)
    styl = post * (1.0 - edges[..., None])
    return (1.0 - strength) * x + strength * styl


def _noise(x, rng, sigma=0.1):
    return x + rng.normal(0.0, sigma, size=x.shape)


_TRANSFORMS = {"palette": _palette, "texture": _texture, "fog": _fog, "edge": _edge, "noise": _noise}


def apply_domain_shift(img: AnnotatedImage, d: DomainSpec) -> AnnotatedImage:
    """Apply ``d``'s transform chain to the pixels; labels are passed through untouched."""
    d.validate()
    if not d.transform_chain:
        return AnnotatedImage(img.pixels.copy(), list(img.labels), d.name if d.name != "source" else img.domain, img.id)
    rng = np.random.default_rng(derive_seed("shift", d.name, img.id))
    x = img.pixels.astype(np.float64)
    for tname, params in d.transform_chain:
        try:
            x = _TRANSFORMS[tname](x, rng, **params)
        except TypeError as exc:
            raise ConfigError(f"bad parameters for transform {tname!r}: {exc}") from exc
        x = np.clip(x, 0.0, 1.0)
    return AnnotatedImage(quantize(x), list(img.labels), d.name, img.id)


# ---------------------------------------------------------------------------
# rotation operator


def rotate(img: np.ndarray, q: int) -> np.ndarray:
    """Rotate an ``H x W [x C]`` array by ``q`` counter-clockwise quarter turns."""
    if q not in (0, 1, 2, 3):
        raise ValueError(f"q must be in {{0,1,2,3}}, got {q!r}")
    return np.ascontiguousarray(np.rot90(img, q, axes=(0, 1)))


def rotate_box(box: Sequence[float], q: int, W: float, H: float) -> tuple:
    """Map a box in a ``W x H`` frame through ``rotate(., q)``.

    The rotated frame is ``H x W`` for odd ``q``.
    """
    if q not in (0, 1, 2, 3):
        raise ValueError(f"q must be in {{0,1,2,3}}, got {q!r}")
    x1, y1, x2, y2 = box
    if not (0 <= x1 < x2 <= W and 0 <= y1 < y2 <= H):
        raise ValueError(f"invalid box {tuple(box)} for a {W}x{H} frame")
    if q == 0:
        return (x1, y1, x2, y2)
    if q == 1:
        return (y1, W - x2, y2, W - x1)
    if q == 2:
        return (W - x2, H - y2, W - x1, H - y1)
    return (H - y2, x1, H - y1, x2)


# ---------------------------------------------------------------------------
# semantic-preserving augmentation


def augment(img: AnnotatedImage, kind: str, seed: int) -> AnnotatedImage:
    if kind not in AUGMENT_KINDS:
        raise ValueError(f"unknown augmentation {kind!r}; expected one of {AUGMENT_KINDS}")
    if kind == "identity":
        return AnnotatedImage(img.pixels.copy(), list(img.labels), img.domain, img.id)
    rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)
    x = img.pixels.astype(np.float64)
    if kind == "grayscale":
        lum = x @ np.array([0.299, 0.587, 0.114])
        x = np.repeat(lum[..., None], 3, axis=2)
    elif kind == "brightness":
        x = x + rng.uniform(-0.25, 0.25)
    elif kind == "contrast":
        m = x.mean()
        x = m + rng.uniform(0.5, 1.5) * (x - m)
    else:
        x = x * rng.uniform(0.7, 1.3, size=3) + rng.uniform(-0.1, 0.1)
        x = _palette(np.clip(x, 0, 1), rng, hue_shift=rng.uniform(-40, 40), saturation=rng.uniform(0.6, 1.4))
    return AnnotatedImage(quantize(x), list(img.labels), img.domain, img.id)


# ---------------------------------------------------------------------------
# datasets


def generate_dataset(spec: SceneSpec, n: int, seed: int, split: str = "train") -> list[AnnotatedImage]:
    """``n`` source scenes; each scene's seed derives from its id, not from generation order."""
    out = []
    for i in range(n):
        iid = f"{split}-{i:05d}"
        out.append(generate_scene(spec, derive_seed("scene", seed, iid), domain="source", image_id=iid))
    return out


def shift_dataset(images: Iterable[AnnotatedImage], d: DomainSpec) -> list[AnnotatedImage]:
    return [apply_domain_shift(im, d) for im in images]


def labels_json(labels: Sequence[BoxLabel]) -> str:
    return json.dumps([lb.to_dict() for lb in labels], sort_keys=True)


def write_dataset(root: str | os.PathLike, images: Sequence[AnnotatedImage], meta: dict | None = None,
                  overwrite: bool = False) -> Path:
    """Write PNG images plus ``annotations.jsonl`` and ``dataset.meta`` into ``root``."""
    root = Path(root)
    if (root / "annotations.jsonl").exists() and not overwrite:
        raise FileExistsError(f"dataset already exists at {root}")
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for im in images:
        fname = f"{im.id}.png"
        arr = np.round(im.pixels * 255.0).astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(root / fname, format="PNG")
        lines.append(json.dumps({
            "id": im.id, "file": fname, "width": im.width, "height": im.height,
            "domain": im.domain, "labels": [lb.to_dict() for lb in im.labels],
        }, sort_keys=True))
    (root / "annotations.jsonl").write_text("\n".join(lines) + "\n")
    meta = meta or {}
    with open(root / "dataset.meta", "w") as fh:
        for k in sorted(meta):
            fh.write(f"{k} = {json.dumps(meta[k], sort_keys=True)}\n")
    return root


def read_dataset(root: str | os.PathLike) -> list[AnnotatedImage]:
    root = Path(root)
    ann = root / "annotations.jsonl"
    if not ann.exists():
        raise FileNotFoundError(f"no annotations.jsonl under {root}")
    out = []
    for line in ann.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        arr = np.asarray(Image.open(root / rec["file"]).convert("RGB"), dtype=np.float32) / 255.0
        labels = [BoxLabel.from_dict(d) for d in rec["labels"]]
        out.append(AnnotatedImage(arr, labels, rec.get("domain", root.name), rec["id"]))
    return out


def dataset_checksum(root: str | os.PathLike) -> str:
    """sha256 over every file in a dataset directory, in name order."""
    h = hashlib.sha256()
    for p in sorted(Path(root).iterdir()):
        if p.is_file():
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def image_checksum(images: Sequence[AnnotatedImage]) -> str:
    h = hashlib.sha256()
    for im in images:
        h.update(im.id.encode())
        h.update(np.ascontiguousarray(im.pixels).tobytes())
        h.update(labels_json(im.labels).encode())
    return h.hexdigest()


