"""A compact two-stage detector written as pure functions of a parameter dict.

Parameter names carry their group as a prefix: ``f.`` for the feature
extractor, ``d.`` for the proposal and ROI heads, ``r.`` for the rotation head
(see :mod:`oneshot_det.rotself`).  Keeping the model functional lets the
meta-learning and adaptation code run forward passes on adapted copies of
any group without touching module state.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torchvision.ops import roi_align

from . import boxes as bx

logger = logging.getLogger(__name__)

Params = dict[str, torch.Tensor]

GROUPS = ("theta_f", "theta_d", "theta_r")
_PREFIX = {"theta_f": "f.", "theta_d": "d.", "theta_r": "r."}

RPN_WEIGHTS = (1.0, 1.0, 1.0, 1.0)
ROI_WEIGHTS = (10.0, 10.0, 5.0, 5.0)


class TrainingFault(RuntimeError):
    """Raised when a forward pass produces a non-finite loss."""


@dataclass(frozen=True)
class DetectorArch:
    num_classes: int = 5
    channels: tuple[int, ...] = (16, 32, 32, 48, 48, 64)
    strides: tuple[int, ...] = (1, 2, 1, 2, 1, 2)
    gn_groups: int = 4
    rpn_channels: int = 64
    anchor_scales: tuple[float, ...] = (16.0, 24.0, 36.0)
    anchor_ratios: tuple[float, ...] = (1.0, 0.5)
    roi_size: int = 4
    roi_hidden: int = 128
    rot_pool: int = 5
    rpn_pre_nms: int = 300
    rpn_post_nms_train: int = 64
    rpn_post_nms_eval: int = 32
    rpn_nms: float = 0.7
    det_nms: float = 0.5
    score_thresh: float = 0.05
    max_dets: int = 50
    rpn_batch: int = 128
    roi_batch: int = 64

    @property
    def stride(self) -> int:
        return int(np.prod(self.strides))

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)

    @property
    def feat_channels(self) -> int:
        return self.channels[-1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "DetectorArch":
        kw = {}
        for k, v in d.items():
            kw[k] = tuple(v) if isinstance(v, list) else v
        return cls(**kw)


# A <=1k-parameter configuration used for gradient checks.
MINI_ARCH = DetectorArch(
    num_classes=2, channels=(4, 4, 4), strides=(2, 2, 2), gn_groups=2, rpn_channels=4,
    anchor_scales=(16.0, 28.0), anchor_ratios=(1.0,), roi_size=2, roi_hidden=0, rot_pool=3,
    rpn_post_nms_train=16, rpn_post_nms_eval=16,
)


@dataclass
class FeatureMap:
    values: torch.Tensor  # C x Hf x Wf
    stride: int
    source_dims: tuple[int, int]  # (W, H)

    @property
    def shape_hwc(self) -> tuple[int, int, int]:
        c, h, w = self.values.shape
        return (h, w, c)


@dataclass(frozen=True)
class Detection:
    class_id: int
    box: tuple[float, float, float, float]
    score: float

    def to_dict(self) -> dict:
        x1, y1, x2, y2 = self.box
        return {"class": self.class_id, "x1": x1, "y1": y1, "x2": x2, "y2": y2, "score": self.score}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Detection":
        return cls(int(d["class"]), (float(d["x1"]), float(d["y1"]), float(d["x2"]), float(d["y2"])), float(d["score"]))


# ---------------------------------------------------------------------------
# parameters


def init_params(arch: DetectorArch, generator: torch.Generator | None = None, dtype=torch.float32) -> Params:
    """Fresh parameters for all three groups, in a stable insertion order."""
    g = generator if generator is not None else torch.Generator().manual_seed(0)

    def normal(shape, std):
        return torch.randn(*shape, generator=g, dtype=torch.float64).mul_(std).to(dtype)

    p: Params = {}
    cin = 3
    for i, cout in enumerate(arch.channels):
        if cout % arch.gn_groups:
            raise ValueError(f"channels {cout} not divisible by gn_groups {arch.gn_groups}")
        p[f"f.conv{i}.w"] = normal((cout, cin, 3, 3), math.sqrt(2.0 / (cin * 9)))
        p[f"f.conv{i}.b"] = torch.zeros(cout, dtype=dtype)
        p[f"f.gn{i}.w"] = torch.ones(cout, dtype=dtype)
        p[f"f.gn{i}.b"] = torch.zeros(cout, dtype=dtype)
        cin = cout
    c, a, k = arch.feat_channels, arch.num_anchors, arch.num_classes
    p["d.rpn.conv.w"] = normal((arch.rpn_channels, c, 3, 3), math.sqrt(2.0 / (c * 9)))
    p["d.rpn.conv.b"] = torch.zeros(arch.rpn_channels, dtype=dtype)
    p["d.rpn.cls.w"] = normal((a, arch.rpn_channels, 1, 1), 0.01)
    p["d.rpn.cls.b"] = torch.zeros(a, dtype=dtype)
    p["d.rpn.reg.w"] = normal((4 * a, arch.rpn_channels, 1, 1), 0.01)
    p["d.rpn.reg.b"] = torch.zeros(4 * a, dtype=dtype)
    roi_in = c * arch.roi_size * arch.roi_size
    if arch.roi_hidden:
        p["d.roi.fc.w"] = normal((arch.roi_hidden, roi_in), math.sqrt(2.0 / roi_in))
        p["d.roi.fc.b"] = torch.zeros(arch.roi_hidden, dtype=dtype)
        roi_in = arch.roi_hidden
    p["d.roi.cls.w"] = normal((k + 1, roi_in), 0.01)
    p["d.roi.cls.b"] = torch.zeros(k + 1, dtype=dtype)
    p["d.roi.reg.w"] = normal((4 * k, roi_in), 0.001)
    p["d.roi.reg.b"] = torch.zeros(4 * k, dtype=dtype)
    rot_in = c * arch.rot_pool * arch.rot_pool
    p["r.fc.w"] = normal((4, rot_in), 0.01)
    p["r.fc.b"] = torch.zeros(4, dtype=dtype)
    return p


def group_of(name: str) -> str:
    for g, pre in _PREFIX.items():
        if name.startswith(pre):
            return g
    raise KeyError(f"parameter {name!r} belongs to no group")


def split_groups(params: Mapping[str, torch.Tensor]) -> dict[str, Params]:
    out: dict[str, Params] = {g: {} for g in GROUPS}
    for k, v in params.items():
        out[group_of(k)][k] = v
    return out


def select(params: Mapping[str, torch.Tensor], *groups: str) -> Params:
    pres = tuple(_PREFIX[g] for g in groups)
    return {k: v for k, v in params.items() if k.startswith(pres)}


def clone_params(params: Mapping[str, torch.Tensor]) -> Params:
    return {k: v.detach().clone() for k, v in params.items()}


def count_params(params: Mapping[str, torch.Tensor]) -> int:
    return int(sum(v.numel() for v in params.values()))


# ---------------------------------------------------------------------------
# forward pieces


def to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """``(H, W, 3)`` or ``(N, H, W, 3)`` arrays -> ``(N, 3, H, W)`` tensor."""
    if isinstance(images, torch.Tensor):
        t = images
        if t.dim() == 3:
            t = t.unsqueeze(0)
        return t.to(dtype)
    if isinstance(images, (list, tuple)):
        arr = np.stack([np.asarray(im) for im in images])
    else:
        arr = np.asarray(images)
        if arr.ndim == 3:
            arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def features(params: Mapping[str, torch.Tensor], x: torch.Tensor, arch: DetectorArch) -> torch.Tensor:
    """Batched feature extractor: ``(N, 3, H, W) -> (N, C, H/stride, W/stride)``."""
    h, w = x.shape[-2:]
    if h % arch.stride or w % arch.stride:
        raise ValueError(f"input {w}x{h} is not a multiple of stride {arch.stride}")
    # centre pixel values so the first layer sees zero-mean-ish inputs
    x = (x - 0.5) * 2.0
    for i, s in enumerate(arch.strides):
        x = F.conv2d(x, params[f"f.conv{i}.w"], params[f"f.conv{i}.b"], stride=s, padding=1)
        x = F.group_norm(x, arch.gn_groups, params[f"f.gn{i}.w"], params[f"f.gn{i}.b"])
        x = F.relu(x)
    return x


def extract_features(img, params: Mapping[str, torch.Tensor], arch: DetectorArch = DetectorArch()) -> FeatureMap:
    """Feature map of a single ``H x W x 3`` image."""
    dtype = next(iter(params.values())).dtype
    x = to_tensor(img, dtype)
    if x.shape[0] != 1:
        raise ValueError("extract_features takes a single image")
    h, w = x.shape[-2:]
    return FeatureMap(features(params, x, arch)[0], arch.stride, (int(w), int(h)))


@lru_cache(maxsize=32)
def _anchors_cached(scales, ratios, stride, hf, wf) -> torch.Tensor:
    base = []
    for s in scales:
        for r in ratios:
            w = s / math.sqrt(r)
            h = s * math.sqrt(r)
            base.append((-w / 2, -h / 2, w / 2, h / 2))
    base_t = torch.tensor(base, dtype=torch.float64)
    ys, xs = torch.meshgrid(torch.arange(hf, dtype=torch.float64), torch.arange(wf, dtype=torch.float64), indexing="ij")
    cx = (xs.reshape(-1) + 0.5) * stride
    cy = (ys.reshape(-1) + 0.5) * stride
    shifts = torch.stack([cx, cy, cx, cy], dim=1)
    return (shifts[:, None, :] + base_t[None, :, :]).reshape(-1, 4)


def anchors(arch: DetectorArch, hf: int, wf: int) -> torch.Tensor:
    """Anchor boxes ordered ``(cell_y, cell_x, anchor)``."""
    return _anchors_cached(tuple(arch.anchor_scales), tuple(arch.anchor_ratios), arch.stride, hf, wf)


def rpn_head(params, fmap: torch.Tensor, arch: DetectorArch) -> tuple[torch.Tensor, torch.Tensor]:
    t = F.relu(F.conv2d(fmap, params["d.rpn.conv.w"], params["d.rpn.conv.b"], padding=1))
    obj = F.conv2d(t, params["d.rpn.cls.w"], params["d.rpn.cls.b"])
    reg = F.conv2d(t, params["d.rpn.reg.w"], params["d.rpn.reg.b"])
    n, a = obj.shape[:2]
    obj = obj.permute(0, 2, 3, 1).reshape(n, -1)
    reg = reg.view(n, a, 4, *reg.shape[-2:]).permute(0, 3, 4, 1, 2).reshape(n, -1, 4)
    return obj, reg


def _proposals_one(obj: torch.Tensor, reg: torch.Tensor, anc: torch.Tensor, width: int, height: int,
                   arch: DetectorArch, training: bool) -> tuple[torch.Tensor, torch.Tensor]:
    obj = obj.detach()
    boxes = bx.decode(anc.to(reg.dtype), reg.detach(), RPN_WEIGHTS)
    boxes = bx.clip_boxes(boxes, width, height)
    keep = ((boxes[:, 2] - boxes[:, 0]) >= 1.0) & ((boxes[:, 3] - boxes[:, 1]) >= 1.0)
    boxes, obj = boxes[keep], obj[keep]
    order = torch.argsort(obj, descending=True, stable=True)[: arch.rpn_pre_nms]
    boxes, obj = boxes[order], obj[order]
    kept = bx.nms(boxes, obj, arch.rpn_nms)
    n = arch.rpn_post_nms_train if training else arch.rpn_post_nms_eval
    kept = kept[:n]
    return boxes[kept], torch.sigmoid(obj[kept])


def propose(params, fmap: torch.Tensor, arch: DetectorArch, image_size: tuple[int, int], training: bool = False):
    """Proposals per image as ``(boxes, objectness)`` pairs, both detached."""
    obj, reg = rpn_head(params, fmap, arch)
    anc = anchors(arch, fmap.shape[-2], fmap.shape[-1])
    w, h = image_size
    return [_proposals_one(obj[i], reg[i], anc, w, h, arch, training) for i in range(fmap.shape[0])]


def propose_regions(fmap: FeatureMap, params, arch: DetectorArch = DetectorArch(), training: bool = False):
    """List of ``(box, objectness)`` for a single feature map."""
    with torch.no_grad():
        (boxes, scores), = propose(params, fmap.values[None], arch, fmap.source_dims, training)
    return [(tuple(float(v) for v in b), float(s)) for b, s in zip(boxes, scores)]


def roi_head(params, fmap: torch.Tensor, rois: list[torch.Tensor], arch: DetectorArch):
    """Class logits ``(P, K+1)`` and class-specific deltas ``(P, K, 4)`` for all rois."""
    pooled = roi_align(fmap, [r.to(fmap.dtype) for r in rois], output_size=arch.roi_size,
                       spatial_scale=1.0 / arch.stride, sampling_ratio=2, aligned=True)
    h = pooled.flatten(1)
    if arch.roi_hidden:
        h = F.relu(F.linear(h, params["d.roi.fc.w"], params["d.roi.fc.b"]))
    logits = F.linear(h, params["d.roi.cls.w"], params["d.roi.cls.b"])
    deltas = F.linear(h, params["d.roi.reg.w"], params["d.roi.reg.b"]).view(-1, arch.num_classes, 4)
    return logits, deltas


def _postprocess(logits, deltas, rois, width, height, arch: DetectorArch, score_thresh: float) -> list[Detection]:
    if rois.shape[0] == 0:
        return []
    probs = torch.softmax(logits, dim=1)
    score, label = probs.max(dim=1)
    fg = label > 0
    if not bool(fg.any()):
        return []
    cls = label[fg] - 1
    d = deltas[fg][torch.arange(int(fg.sum())), cls]
    boxes = bx.clip_boxes(bx.decode(rois[fg].to(d.dtype), d, ROI_WEIGHTS), width, height)
    score = score[fg]
    ok = ((boxes[:, 2] - boxes[:, 0]) > 0) & ((boxes[:, 3] - boxes[:, 1]) > 0)
    boxes, score, cls = boxes[ok], score[ok], cls[ok]
    keep = bx.classwise_nms(boxes, score, cls, arch.det_nms)
    keep = keep[score[keep] >= score_thresh][: arch.max_dets]
    return [Detection(int(cls[i]), tuple(float(v) for v in boxes[i]), float(score[i])) for i in keep]


def detect(params, images: torch.Tensor, arch: DetectorArch, score_thresh: float | None = None,
           fmap: torch.Tensor | None = None) -> list[list[Detection]]:
    """Inference path: features -> proposals -> ROI classification -> NMS -> threshold."""
    thresh = arch.score_thresh if score_thresh is None else score_thresh
    with torch.no_grad():
        if fmap is None:
            fmap = features(params, images, arch)
        h, w = images.shape[-2:]
        props = propose(params, fmap, arch, (w, h), training=False)
        rois = [p[0] for p in props]
        logits, deltas = roi_head(params, fmap, rois, arch)
        out, start = [], 0
        for r in rois:
            n = r.shape[0]
            out.append(_postprocess(logits[start:start + n], deltas[start:start + n], r, w, h, arch, thresh))
            start += n
    return out


def roi_classify(fmap: FeatureMap, proposals, params, arch: DetectorArch = DetectorArch(),
                 score_thresh: float | None = None) -> list[Detection]:
    """Classify and refine explicit proposals (``[(box, objectness), ...]`` or boxes)."""
    if len(proposals) == 0:
        return []
    boxes = [p[0] if isinstance(p[0], (tuple, list)) else p for p in proposals]
    rois = torch.tensor(boxes, dtype=fmap.values.dtype).reshape(-1, 4)
    thresh = arch.score_thresh if score_thresh is None else score_thresh
    with torch.no_grad():
        logits, deltas = roi_head(params, fmap.values[None], [rois], arch)
        w, h = fmap.source_dims
        return _postprocess(logits, deltas, rois, w, h, arch, thresh)


def class_posteriors(fmap: FeatureMap, boxes, params, arch: DetectorArch = DetectorArch()) -> torch.Tensor:
    rois = torch.as_tensor(boxes, dtype=fmap.values.dtype).reshape(-1, 4)
    with torch.no_grad():
        logits, _ = roi_head(params, fmap.values[None], [rois], arch)
    return torch.softmax(logits, dim=1)


# ---------------------------------------------------------------------------
# loss


def _sample(labels: torch.Tensor, batch: int, pos_fraction: float, generator: torch.Generator | None) -> torch.Tensor:
    """Indices of labelled entries (label >= 0) to use; all of them without a generator."""
    pos = torch.nonzero(labels > 0).flatten()
    neg = torch.nonzero(labels == 0).flatten()
    if generator is None:
        return torch.cat([pos, neg])
    n_pos = min(pos.numel(), int(batch * pos_fraction))
    n_neg = min(neg.numel(), batch - n_pos)
    pos = pos[torch.randperm(pos.numel(), generator=generator)[:n_pos]]
    neg = neg[torch.randperm(neg.numel(), generator=generator)[:n_neg]]
    return torch.cat([pos, neg])


def _rpn_targets(anc: torch.Tensor, gt: torch.Tensor):
    labels = torch.zeros(anc.shape[0], dtype=torch.long)
    matched = torch.zeros(anc.shape[0], dtype=torch.long)
    if gt.shape[0] == 0:
        return labels, matched
    ious = bx.box_iou(anc, gt)
    best, matched = ious.max(dim=1)
    labels[(best >= 0.3) & (best < 0.5)] = -1
    labels[best >= 0.5] = 1
    # every gt keeps its best anchor(s) as positives
    gt_best = ious.max(dim=0).values
    for j in range(gt.shape[0]):
        if gt_best[j] > 0:
            hit = torch.nonzero(ious[:, j] == gt_best[j]).flatten()
            labels[hit] = 1
            matched[hit] = j
    return labels, matched


def detection_loss(params, images: torch.Tensor, targets: Sequence[tuple[torch.Tensor, torch.Tensor]],
                   arch: DetectorArch, generator: torch.Generator | None = None, fmap: torch.Tensor | None = None,
                   proposals: Sequence[torch.Tensor] | None = None):
    """Supervised two-stage loss, averaged over the batch.

    ``targets`` holds ``(boxes (G, 4), classes (G,))`` per image.  Returns the
    total and a dict of its four terms.  Without a ``generator`` every
    labelled anchor and ROI is used, which makes the loss a deterministic
    function of the parameters.  Proposals are constants for the gradient;
    passing ``proposals`` (one ``(P, 4)`` tensor per image) pins them.
    """
    if fmap is None:
        fmap = features(params, images, arch)
    dtype = fmap.dtype
    n = fmap.shape[0]
    h, w = images.shape[-2:]
    obj, reg = rpn_head(params, fmap, arch)
    anc = anchors(arch, fmap.shape[-2], fmap.shape[-1]).to(dtype)
    if proposals is None:
        props = [_proposals_one(obj[i], reg[i], anc, w, h, arch, training=True)[0] for i in range(n)]
    else:
        props = [p.to(dtype).reshape(-1, 4) for p in proposals]

    parts = {k: fmap.new_zeros(()) for k in ("rpn_obj", "rpn_box", "roi_cls", "roi_box")}
    rois_all, roi_labels, roi_targets = [], [], []
    for i in range(n):
        gt_boxes = targets[i][0].to(dtype).reshape(-1, 4)
        gt_cls = targets[i][1].long().reshape(-1)
        labels, matched = _rpn_targets(anc, gt_boxes)
        idx = _sample(labels, arch.rpn_batch, 0.5, generator)
        if idx.numel():
            tgt = labels[idx].to(dtype)
            parts["rpn_obj"] = parts["rpn_obj"] + F.binary_cross_entropy_with_logits(obj[i, idx], tgt)
            pos = idx[labels[idx] == 1]
            if pos.numel():
                t = bx.encode(anc[pos], gt_boxes[matched[pos]], RPN_WEIGHTS)
                parts["rpn_box"] = parts["rpn_box"] + F.smooth_l1_loss(reg[i, pos], t, beta=1.0, reduction="sum") / idx.numel()

        rois = props[i]
        if gt_boxes.shape[0]:
            rois = torch.cat([rois, gt_boxes])
            ious = bx.box_iou(rois, gt_boxes)
            best, m = ious.max(dim=1)
            lab = torch.where(best >= 0.5, gt_cls[m] + 1, torch.zeros_like(m))
            tgt_boxes = gt_boxes[m]
        else:
            lab = torch.zeros(rois.shape[0], dtype=torch.long)
            tgt_boxes = rois
        idx = _sample(lab, arch.roi_batch, 0.25, generator)
        rois_all.append(rois[idx])
        roi_labels.append(lab[idx])
        roi_targets.append(tgt_boxes[idx])

    logits, deltas = roi_head(params, fmap, rois_all, arch)
    start = 0
    for i in range(n):
        k = rois_all[i].shape[0]
        if k == 0:
            continue
        lg, dl = logits[start:start + k], deltas[start:start + k]
        lab = roi_labels[i]
        parts["roi_cls"] = parts["roi_cls"] + F.cross_entropy(lg, lab)
        pos = torch.nonzero(lab > 0).flatten()
        if pos.numel():
            t = bx.encode(rois_all[i][pos], roi_targets[i][pos], ROI_WEIGHTS)
            pred = dl[pos, lab[pos] - 1]
            parts["roi_box"] = parts["roi_box"] + F.smooth_l1_loss(pred, t, beta=1.0, reduction="sum") / k
        start += k

    parts = {k: v / n for k, v in parts.items()}
    total = parts["rpn_obj"] + parts["rpn_box"] + parts["roi_cls"] + parts["roi_box"]
    if not torch.isfinite(total):
        raise TrainingFault(f"non-finite detection loss: { {k: float(v) for k, v in parts.items()} }")
    return total, parts


def targets_from(images) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """``(boxes, classes)`` tensors from :class:`AnnotatedImage` labels."""
    out = []
    for im in images:
        out.append((torch.as_tensor(im.boxes(), dtype=torch.float64).reshape(-1, 4),
                    torch.as_tensor(im.classes(), dtype=torch.long)))
    return out
