"""Benchmark stages shared by the command line and the acceptance suite.

On-disk layout under an output root::

    data/source-train, data/source-val, data/target-<domain>   datasets
    train/<variant>-s<seed>/checkpoint.npz, metric_log.csv     checkpoints
    eval/<name>/metrics.csv, breakdown.png, predictions/        adapt-eval
    curve/<name>/curve.csv, curve.png                            iteration sweeps
    report/summary.csv, summary.md                               seed-averaged tables

Every artifact directory holds exactly one ``manifest.json``.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import platform
import shutil
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import evalkit
from .adapt import adapt_batch, write_predictions
from .checkpoint import Checkpoint
from .detcore import DetectorArch
from .synthgen import (
    DOMAIN_CATALOGUE,
    AnnotatedImage,
    SOURCE_DOMAIN,
    dataset_checksum,
    derive_seed,
    generate_dataset,
    read_dataset,
    shift_dataset,
    write_dataset,
)
from .train import META_VARIANTS, pretrain_multitask, meta_pretrain

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "ONESHOT_OUTPUT_ROOT"
MANIFEST = "manifest.json"
METRIC_LOG_COLUMNS = ("epoch", "split", "L_d", "L_r", "mAP")


def output_root(explicit: str | os.PathLike | None = None) -> Path:
    """``explicit``, else ``$ONESHOT_OUTPUT_ROOT``, else ``./runs``."""
    return Path(explicit or os.environ.get(OUTPUT_ROOT_ENV) or "runs")


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    input_hash: str
    outputs: list[str] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)
    environment: dict[str, str] = field(default_factory=lambda: {
        "python": platform.python_version(), "torch": torch.__version__, "numpy": np.__version__})

    def write(self, directory: str | os.PathLike) -> Path:
        path = Path(directory) / MANIFEST
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str) + "\n")
        return path

    @classmethod
    def read(cls, directory: str | os.PathLike) -> "RunManifest":
        return cls(**json.loads((Path(directory) / MANIFEST).read_text()))


def hash_inputs(*parts) -> str:
    """Content hash over files, directories (sorted walk) and plain values."""
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, (str, os.PathLike)) and Path(p).exists():
            path = Path(p)
            files = sorted(f for f in path.rglob("*") if f.is_file() and f.name != MANIFEST) if path.is_dir() else [path]
            for f in files:
                h.update(str(f.relative_to(path) if path.is_dir() else f.name).encode())
                h.update(f.read_bytes())
        else:
            h.update(json.dumps(p, sort_keys=True, default=str).encode())
    return h.hexdigest()


def prepare_dir(path: Path, overwrite: bool) -> Path:
    """Create ``path``; an existing non-empty directory needs ``overwrite``."""
    if path.exists() and any(path.iterdir()):
        if not overwrite:
            raise FileExistsError(f"{path} already exists; pass --overwrite to replace it")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# data


def data_dirs(root: Path, domains: Sequence[str]) -> dict[str, Path]:
    d = {"train": root / "data" / "source-train", "val": root / "data" / "source-val"}
    d.update({name: root / "data" / f"target-{name}" for name in domains})
    return d


def make_datasets(cfg) -> dict[str, list[AnnotatedImage]]:
    """Source train/val plus one shifted copy of a held-out set per target domain."""
    spec = cfg.scene_spec()
    seed = derive_seed(cfg.seed, "data")
    out = {
        "train": generate_dataset(spec, cfg.n_train, derive_seed(seed, "train"), "train"),
        "val": generate_dataset(spec, cfg.n_val, derive_seed(seed, "val"), "val"),
    }
    held_out = generate_dataset(spec, cfg.n_target, derive_seed(seed, "target"), "target")
    for name in cfg.domains:
        out[name] = shift_dataset(held_out, DOMAIN_CATALOGUE[name])
    return out


def gen_data(cfg, root: Path, overwrite: bool = False) -> dict[str, str]:
    t0 = time.perf_counter()
    base = prepare_dir(root / "data", overwrite)
    dirs = data_dirs(root, cfg.domains)
    sets = make_datasets(cfg)
    sums = {}
    for key, images in sets.items():
        domain = SOURCE_DOMAIN.name if key in ("train", "val") else key
        meta = {"spec": asdict(cfg.scene_spec()), "domain": domain, "split": key, "seed": cfg.seed,
                "count": len(images)}
        if key not in ("train", "val"):
            meta["shift"] = DOMAIN_CATALOGUE[key].to_dict()
        write_dataset(dirs[key], images, meta)
        sums[key] = dataset_checksum(dirs[key])
    RunManifest("gen-data", cfg.to_dict(), cfg.seed, hash_inputs(cfg.to_dict()),
                [str(p) for p in dirs.values()], {"total_s": time.perf_counter() - t0}).write(base)
    (base / "checksums.json").write_text(json.dumps(sums, indent=2, sort_keys=True) + "\n")
    return sums


def load_split(root: Path, key: str, domains: Sequence[str] = ()) -> list[AnnotatedImage]:
    dirs = data_dirs(root, domains)
    path = dirs[key] if key in dirs else data_dirs(root, [key])[key]
    if not (path / "annotations.jsonl").exists():
        raise FileNotFoundError(f"dataset {key!r} not found at {path}; run gen-data first")
    return read_dataset(path)


# ---------------------------------------------------------------------------
# training


def write_metric_log(path: Path, rows: Sequence[dict]) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]))
                        for k in METRIC_LOG_COLUMNS})
    return path


def val_evaluator(val: Sequence[AnnotatedImage], arch: DetectorArch):
    from .detcore import detect, to_tensor

    gts = [im.labels for im in val]

    def evaluate(params) -> float:
        with torch.no_grad():
            p = {k: v.detach() for k, v in params.items()}
            dets = []
            for i in range(0, len(val), 32):
                dets += detect(p, to_tensor([im.pixels for im in val[i:i + 32]]), arch)
        return evalkit.mean_average_precision(dets, gts)

    return evaluate


def train(cfg, source: Sequence[AnnotatedImage], val: Sequence[AnnotatedImage] | None = None,
          arch: DetectorArch | None = None, warm: Checkpoint | None = None) -> Checkpoint:
    """Pretrain (or meta-pretrain from ``warm``) one variant."""
    arch = arch or (warm.arch if warm is not None else cfg.detector_arch())
    tc = cfg.train_config()
    evaluate = val_evaluator(val, arch) if val else None
    if tc.variant in META_VARIANTS:
        if warm is None:
            raise ValueError(f"variant {tc.variant} needs a warm-start checkpoint (warm_start = path)")
        return meta_pretrain(source, tc, warm, arch, evaluate=evaluate)
    return pretrain_multitask(source, tc, arch, evaluate=evaluate)


def train_dir(root: Path, variant: str, seed: int) -> Path:
    return root / "train" / f"{variant}-s{seed}"


def cmd_train(cfg, root: Path, overwrite: bool = False, out_dir: Path | None = None) -> Path:
    t0 = time.perf_counter()
    errs = cfg.validate()
    if errs:
        raise ValueError("; ".join(errs))
    warm = None
    if cfg.variant in META_VARIANTS:
        if not cfg.warm_start:
            raise ValueError(f"variant {cfg.variant} requires warm_start = <oshot checkpoint path>")
        if not Path(cfg.warm_start).exists():
            raise FileNotFoundError(f"warm-start checkpoint {cfg.warm_start} not found")
        warm = Checkpoint.load(cfg.warm_start)
        warm.require_groups()
    source = load_split(root, "train")
    val = load_split(root, "val")
    out = prepare_dir(out_dir or train_dir(root, cfg.variant, cfg.seed), overwrite)
    ck = train(cfg, source, val, warm=warm)
    ck.save(out / "checkpoint.npz")
    write_metric_log(out / "metric_log.csv", ck.metric_log)
    inputs = [root / "data" / "source-train", cfg.to_dict()] + ([cfg.warm_start] if warm else [])
    RunManifest("train", cfg.to_dict(), cfg.seed, hash_inputs(*inputs),
                [str(out / "checkpoint.npz"), str(out / "metric_log.csv")],
                {"total_s": time.perf_counter() - t0}).write(out)
    return out


# ---------------------------------------------------------------------------
# adaptation and evaluation


def variant_of(ckpt: Checkpoint) -> str:
    return str(ckpt.config.get("variant", "unknown"))


def evaluate(ckpt: Checkpoint, targets: dict[str, Sequence[AnnotatedImage]], cfg, gammas: Sequence[int],
             variant: str | None = None, pred_dir: Path | None = None):
    """Metrics rows and error breakdowns for every (gamma, domain).

    A single adaptation run per image to ``max(gammas)`` supplies every
    requested gamma through snapshots.
    """
    ckpt.require_groups()
    variant = variant or variant_of(ckpt)
    gammas = sorted(set(int(g) for g in gammas))
    acfg = cfg.adapt_config(max(gammas))
    rows, breakdowns, timings = [], {}, {}
    for domain, images in targets.items():
        outs = adapt_batch(images, ckpt, acfg, workers=cfg.workers, snapshot_at=gammas)
        timings[domain] = float(np.mean([o.seconds for o in outs]))
        gts = [im.labels for im in images]
        for g in gammas:
            missing = [o.image_id for o in outs if g not in o.snapshots]
            if missing:
                logger.warning("%d images faulted before gamma=%d on %s", len(missing), g, domain)
                rows.append({"variant": variant, "gamma": g, "domain": domain, "seed": cfg.seed, "mAP": None,
                             "missing": len(missing)})
                continue
            dets = [o.snapshots[g] for o in outs]
            eb = evalkit.tide_decompose(dets, gts)
            breakdowns[(variant, g, domain)] = eb
            rows.append({"variant": variant, "gamma": g, "domain": domain, "seed": cfg.seed, **eb.row(),
                         "missing": 0})
            if pred_dir is not None:
                for o in outs:
                    o.detections = o.snapshots[g]
                    o.gamma = g
                write_predictions(pred_dir / f"{variant}-{domain}-g{g}.jsonl", outs)
    return rows, breakdowns, timings


def cmd_adapt_eval(cfg, root: Path, checkpoints: Sequence[str], name: str = "default", overwrite: bool = False,
                   curve: bool = False) -> Path:
    """Adapt-and-evaluate each checkpoint on every target domain at gamma 0 and ``cfg.gamma``."""
    t0 = time.perf_counter()
    errs = cfg.validate()
    if errs:
        raise ValueError("; ".join(errs))
    cks = []
    for p in checkpoints:
        if not Path(p).exists():
            raise FileNotFoundError(f"checkpoint {p} not found")
        ck = Checkpoint.load(p)
        ck.require_groups()
        cks.append(ck)
    if not cks:
        raise ValueError("adapt-eval needs at least one --checkpoint")
    targets = {d: load_split(root, d, cfg.domains) for d in cfg.domains}
    out = prepare_dir(root / "eval" / name, overwrite)
    rows, bds, timings = [], {}, {}
    for ck in cks:
        gammas = sorted({0, cfg.gamma} | (set(cfg.gamma_list) if curve else set()))
        r, b, t = evaluate(ck, targets, cfg, gammas, pred_dir=out / "predictions")
        table = [x for x in r if x["gamma"] in (0, cfg.gamma)]
        rows += table
        bds.update(b)
        timings.update({f"{variant_of(ck)}/{d}_s_per_image": v for d, v in t.items()})
        if curve:
            crow = [{"variant": x["variant"], "gamma": x["gamma"], "domain": x["domain"], "seed": x["seed"],
                     "mAP": x["mAP"], "missing": x["missing"]} for x in r]
            _write_curve(out, crow, f"curve-{variant_of(ck)}")
    evalkit.write_metrics_csv(out / "metrics.csv", rows)
    evalkit.plot_breakdown(out / "breakdown.png",
                           {f"{v} g={g} {d}": eb for (v, g, d), eb in bds.items() if g in (0, cfg.gamma)})
    timings["total_s"] = time.perf_counter() - t0
    RunManifest("adapt-eval", cfg.to_dict(), cfg.seed,
                hash_inputs(*checkpoints, *[data_dirs(root, cfg.domains)[d] for d in cfg.domains], cfg.to_dict()),
                sorted(str(p) for p in out.rglob("*") if p.is_file()), timings).write(out)
    return out


def _write_curve(out: Path, rows: list[dict], stem: str) -> None:
    cols = ["variant", "gamma", "domain", "seed", "mAP", "missing"]
    with open(out / f"{stem}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r[k] is None else (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]))
                        for k in cols})
    evalkit.plot_curve(out / f"{stem}.png", rows, title="mAP@0.5 vs adaptation iterations")


def cmd_curve(cfg, root: Path, checkpoint: str, name: str = "default", overwrite: bool = False) -> Path:
    """Iterations sweep of one checkpoint over ``cfg.gamma_list`` on every target domain."""
    t0 = time.perf_counter()
    errs = cfg.validate()
    if errs:
        raise ValueError("; ".join(errs))
    if not Path(checkpoint).exists():
        raise FileNotFoundError(f"checkpoint {checkpoint} not found")
    ck = Checkpoint.load(checkpoint)
    ck.require_groups()
    targets = {d: load_split(root, d, cfg.domains) for d in cfg.domains}
    out = prepare_dir(root / "curve" / name, overwrite)
    rows = []
    for d, images in targets.items():
        for r in evalkit.iterations_curve(ck, images, cfg.gamma_list, cfg.adapt_config(), cfg.workers):
            rows.append({"variant": variant_of(ck), "domain": d, "seed": cfg.seed, **r})
    _write_curve(out, rows, "curve")
    RunManifest("curve", cfg.to_dict(), cfg.seed, hash_inputs(checkpoint, cfg.to_dict()),
                [str(out / "curve.csv"), str(out / "curve.png")], {"total_s": time.perf_counter() - t0}).write(out)
    return out


# ---------------------------------------------------------------------------
# report


def read_metrics(paths: Sequence[Path]) -> list[dict]:
    rows = []
    for p in paths:
        with open(p, newline="") as fh:
            rows += list(csv.DictReader(fh))
    return rows


def summarize(rows: Sequence[dict]) -> list[dict]:
    """Mean and spread of mAP over seeds per (variant, gamma, domain), plus a per-variant domain mean."""
    groups: dict[tuple, list[float]] = defaultdict(list)
    for r in rows:
        if r.get("mAP") in (None, ""):
            continue
        groups[(r["variant"], int(r["gamma"]), r["domain"])].append(float(r["mAP"]))
    out = []
    for (v, g, d), vals in sorted(groups.items()):
        out.append({"variant": v, "gamma": g, "domain": d, "seeds": len(vals), "mAP_mean": float(np.mean(vals)),
                    "mAP_std": float(np.std(vals))})
    per: dict[tuple, list[float]] = defaultdict(list)
    for r in out:
        per[(r["variant"], r["gamma"])].append(r["mAP_mean"])
    for (v, g), vals in sorted(per.items()):
        out.append({"variant": v, "gamma": g, "domain": "mean", "seeds": "", "mAP_mean": float(np.mean(vals)),
                    "mAP_std": ""})
    return out


def cmd_report(root: Path, overwrite: bool = False) -> Path:
    t0 = time.perf_counter()
    paths = sorted((root / "eval").glob("*/metrics.csv"))
    if not paths:
        raise FileNotFoundError(f"no metrics.csv under {root / 'eval'}; run adapt-eval first")
    summary = summarize(read_metrics(paths))
    out = prepare_dir(root / "report", overwrite)
    cols = ["variant", "gamma", "domain", "seeds", "mAP_mean", "mAP_std"]
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in summary:
            w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in cols})
    domains = sorted({r["domain"] for r in summary if r["domain"] != "mean"}) + ["mean"]
    keys = sorted({(r["variant"], r["gamma"]) for r in summary})
    cell = {(r["variant"], r["gamma"], r["domain"]): r["mAP_mean"] for r in summary}
    lines = ["| variant | gamma | " + " | ".join(domains) + " |", "|---|---|" + "---|" * len(domains)]
    for v, g in keys:
        vals = [f"{100 * cell[(v, g, d)]:.1f}" if (v, g, d) in cell else "-" for d in domains]
        lines.append(f"| {v} | {g} | " + " | ".join(vals) + " |")
    lines += ["", "mAP@0.5 in percent, averaged over seeds. Error breakdowns in eval/*/breakdown.png are "
                  "count-based shares, not mAP-impact units."]
    (out / "summary.md").write_text("\n".join(lines) + "\n")
    RunManifest("report", {"sources": [str(p) for p in paths]}, 0, hash_inputs(*paths),
                [str(out / "summary.csv"), str(out / "summary.md")], {"total_s": time.perf_counter() - t0}).write(out)
    return out
