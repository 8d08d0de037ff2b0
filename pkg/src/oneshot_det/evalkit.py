"""mAP@0.5 and a count-based six-way detection error breakdown.

Detections and ground truths are given per image as parallel sequences:
``dets[i]`` is a list of :class:`Detection`, ``gts[i]`` a list of
``(class_id, box)`` pairs (or :class:`BoxLabel`).
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .boxes import iou
from .detcore import Detection

ERROR_CATEGORIES = ("Cls", "Loc", "Both", "Dupe", "Bkg", "Miss")
FG_THRESH = 0.5
BG_THRESH = 0.1


def _gt_pairs(gt) -> list[tuple[int, tuple]]:
    out = []
    for g in gt:
        if hasattr(g, "class_id"):
            out.append((int(g.class_id), tuple(float(v) for v in g.box)))
        else:
            out.append((int(g[0]), tuple(float(v) for v in g[1])))
    return out


def _ranked(dets: Sequence[Sequence[Detection]], class_id: int | None = None):
    """All detections as ``(image, index, det)`` sorted by score, ties by (image, index)."""
    flat = [(i, j, d) for i, ds in enumerate(dets) for j, d in enumerate(ds)
            if class_id is None or d.class_id == class_id]
    flat.sort(key=lambda t: (-t[2].score, t[0], t[1]))
    return flat


@dataclass
class MatchResult:
    """Greedy matching outcome for one class (or all classes)."""

    det_matches: dict[tuple[int, int], int | None] = field(default_factory=dict)
    det_iou_max: dict[tuple[int, int], float] = field(default_factory=dict)
    det_class_correct: dict[tuple[int, int], bool] = field(default_factory=dict)
    gt_covered: dict[tuple[int, int], bool] = field(default_factory=dict)


def match(dets: Sequence[Sequence[Detection]], gts, iou_thresh: float = FG_THRESH) -> MatchResult:
    """Class-aware greedy matching by descending score.

    Each detection takes the highest-IoU still-unmatched ground truth of its
    own class if that IoU reaches ``iou_thresh``.
    """
    gts = [_gt_pairs(g) for g in gts]
    res = MatchResult()
    used = [[False] * len(g) for g in gts]
    for i, j, d in _ranked(dets):
        best, best_k, iou_max = -1.0, None, 0.0
        for k, (c, b) in enumerate(gts[i]):
            if c != d.class_id:
                continue
            o = iou(d.box, b)
            iou_max = max(iou_max, o)
            if not used[i][k] and o >= iou_thresh and o > best:
                best, best_k = o, k
        if best_k is not None:
            used[i][best_k] = True
        res.det_matches[(i, j)] = best_k
        res.det_iou_max[(i, j)] = iou_max
        res.det_class_correct[(i, j)] = best_k is not None
    for i, g in enumerate(gts):
        for k in range(len(g)):
            res.gt_covered[(i, k)] = used[i][k]
    return res


def ap_from_pr(tp: Sequence[bool], n_gt: int) -> float:
    """All-point interpolated area under the precision/recall curve."""
    if n_gt == 0:
        raise ValueError("AP undefined without ground truth")
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(dets: Sequence[Sequence[Detection]], gts, class_id: int,
                      iou_thresh: float = FG_THRESH) -> float:
    gts = [_gt_pairs(g) for g in gts]
    n_gt = sum(1 for g in gts for c, _ in g if c == class_id)
    if n_gt == 0:
        raise ValueError(f"class {class_id} has no ground truth")
    cls_dets = [[d for d in ds if d.class_id == class_id] for ds in dets]
    m = match(cls_dets, [[(c, b) for c, b in g if c == class_id] for g in gts], iou_thresh)
    tp = [m.det_matches[(i, j)] is not None for i, j, _ in _ranked(cls_dets)]
    return ap_from_pr(tp, n_gt)


def mean_average_precision(dets: Sequence[Sequence[Detection]], gts, iou_thresh: float = FG_THRESH,
                           per_class: bool = False):
    """Mean AP over classes that have at least one ground truth box."""
    if len(dets) != len(gts):
        raise ValueError("need detections and ground truth for the same images")
    gts = [_gt_pairs(g) for g in gts]
    classes = sorted({c for g in gts for c, _ in g})
    aps = {c: average_precision(dets, gts, c, iou_thresh) for c in classes}
    m = float(np.mean(list(aps.values()))) if aps else 0.0
    return (m, aps) if per_class else m


@dataclass
class ErrorBreakdown:
    map50: float
    counts: dict[str, int]
    fp_count: int
    fn_count: int
    tp_count: int = 0

    @property
    def shares(self) -> dict[str, float]:
        total = sum(self.counts.values())
        return {k: (v / total if total else 0.0) for k, v in self.counts.items()}

    def row(self) -> dict:
        out = {"mAP": self.map50}
        out.update({k: self.counts[k] for k in ERROR_CATEGORIES})
        out.update({"FP": self.fp_count, "FN": self.fn_count})
        return out


def classify_false_positive(det: Detection, gts: Sequence[tuple[int, tuple]], gt_used: Sequence[bool]) -> tuple[str, int | None]:
    """Error category of an unmatched detection and the ground truth it points at.

    Checked in order: Dupe, Bkg, Cls, Loc, Both.
    """
    same = [(iou(det.box, b), k) for k, (c, b) in enumerate(gts) if c == det.class_id]
    other = [(iou(det.box, b), k) for k, (c, b) in enumerate(gts) if c != det.class_id]
    same_max = max(same, default=(0.0, None))
    other_max = max(other, default=(0.0, None))
    any_max = max(same_max[0], other_max[0])
    if same_max[0] >= FG_THRESH and gt_used[same_max[1]]:
        return "Dupe", same_max[1]
    if any_max < BG_THRESH:
        return "Bkg", None
    if other_max[0] >= FG_THRESH:
        return "Cls", other_max[1]
    if same_max[0] >= BG_THRESH:
        return "Loc", same_max[1]
    return "Both", other_max[1]


def tide_decompose(dets: Sequence[Sequence[Detection]], gts, iou_thresh: float = FG_THRESH,
                   per_detection: bool = False):
    """Assign every false positive one category and count uncovered ground truths as Miss.

    A ground truth is covered if a true positive matched it or if a Cls, Loc
    or Both error points at it (fixing that error would recover it).
    """
    gts = [_gt_pairs(g) for g in gts]
    m = match(dets, gts, iou_thresh)
    counts = {k: 0 for k in ERROR_CATEGORIES}
    covered = {key: v for key, v in m.gt_covered.items()}
    labels: dict[tuple[int, int], str | None] = {}
    used = [[m.gt_covered[(i, k)] for k in range(len(g))] for i, g in enumerate(gts)]
    fp = tp = 0
    for i, j, d in _ranked(dets):
        if m.det_matches[(i, j)] is not None:
            labels[(i, j)] = None
            tp += 1
            continue
        fp += 1
        cat, k = classify_false_positive(d, gts[i], used[i])
        counts[cat] += 1
        labels[(i, j)] = cat
        if cat in ("Cls", "Loc", "Both") and k is not None:
            covered[(i, k)] = True
    fn = sum(1 for v in m.gt_covered.values() if not v)
    counts["Miss"] = sum(1 for v in covered.values() if not v)
    eb = ErrorBreakdown(mean_average_precision(dets, gts, iou_thresh) if gts and any(gts) else 0.0,
                        counts, fp, fn, tp)
    return (eb, labels) if per_detection else eb


CURVE_GAMMAS = (0, 1, 2, 5, 10, 15, 20, 30, 50)


def iterations_curve(ckpt, target: Sequence, gamma_list: Sequence[int] = CURVE_GAMMAS, cfg=None,
                     workers: int = 1) -> list[dict]:
    """mAP@0.5 after each number of adaptation iterations in ``gamma_list``.

    Every image is adapted once to ``max(gamma_list)`` with intermediate
    snapshots, which equals separate runs per gamma because each run is a
    prefix of the longest one.  A gamma at which any image faulted is
    reported with ``mAP`` None and its ``missing`` count.
    """
    from .adapt import AdaptConfig, adapt_batch

    gammas = [int(g) for g in gamma_list]
    if not gammas or gammas != sorted(set(gammas)) or gammas[0] != 0:
        raise ValueError("gamma_list must be strictly ascending and start at 0")
    cfg = cfg or AdaptConfig()
    run = AdaptConfig(gammas[-1], cfg.inner_lr, cfg.seed, cfg.eval_rotation_loss)
    outs = adapt_batch(target, ckpt, run, workers=workers, snapshot_at=gammas)
    gts = [im.labels for im in target]
    rows = []
    for g in gammas:
        missing = sum(1 for o in outs if g not in o.snapshots)
        m = None if missing else mean_average_precision([o.snapshots[g] for o in outs], gts)
        rows.append({"gamma": g, "mAP": m, "missing": missing})
    return rows


def write_metrics_csv(path: str | os.PathLike, rows: Sequence[dict]) -> Path:
    """Rows with keys variant, gamma, domain, seed, mAP and the six categories."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ["variant", "gamma", "domain", "seed", "mAP", *ERROR_CATEGORIES, "FP", "FN"]
    extra = [k for r in rows for k in r if k not in cols]
    cols += list(dict.fromkeys(extra))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return path


def plot_breakdown(path: str | os.PathLike, breakdowns: dict[str, ErrorBreakdown], title: str = "") -> Path:
    """Grouped bar chart of error counts; units are counts, not mAP impact."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = list(breakdowns)
    x = np.arange(len(ERROR_CATEGORIES))
    width = 0.8 / max(len(names), 1)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for n, name in enumerate(names):
        ax.bar(x + n * width, [breakdowns[name].counts[c] for c in ERROR_CATEGORIES], width, label=name)
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels(ERROR_CATEGORIES)
    ax.set_ylabel("error count")
    ax.set_title(title or "error breakdown (count-based, not mAP impact)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_curve(path: str | os.PathLike, rows: Sequence[dict], title: str = "") -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    series: dict[str, list] = {}
    for r in rows:
        if r.get("mAP") is None:
            continue  # missing point from an adaptation fault
        label = " ".join(str(r[k]) for k in ("variant", "domain") if r.get(k))
        series.setdefault(label, []).append((r["gamma"], 100.0 * r["mAP"]))
    for name, pts in series.items():
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=name)
    ax.set_xlabel("adaptation iterations (gamma)")
    ax.set_ylabel("mAP@0.5 (%)")
    ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
