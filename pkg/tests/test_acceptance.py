"""Acceptance suite: one test per criterion, each recording a pass/fail line.

The benchmark fixture trains baseline, oshot, tran-oshot and full-oshot on
three seeds and evaluates them on three shifted targets of 100 images each
(about 25 minutes on one CPU core).  Set ``ONESHOT_BENCH_DIR`` to keep its
outputs and reuse every finished stage on the next run.
"""
import csv
import dataclasses
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from _oracles import fd_check
from test_evalkit import HAND_SCENES, TIDE_CASES, D
from test_synthgen import mask_bbox_after_rotation
from test_train import TOY_ARCH, _toy_problem

from oneshot_det import cli, config, pipeline, rotself
from oneshot_det.adapt import AdaptConfig, adapt_batch, adapt_one
from oneshot_det.checkpoint import Checkpoint
from oneshot_det.detcore import select, to_tensor
from oneshot_det.evalkit import ERROR_CATEGORIES, average_precision, mean_average_precision, tide_decompose
from oneshot_det.rotself import boxcrop, pseudoboxcrop, rotate_tensor
from oneshot_det.synthgen import rotate_box
from oneshot_det.train import meta_objective

BENCH_CFG = Path(__file__).resolve().parents[1] / "configs" / "benchmark.cfg"
SEEDS = (0, 1, 2)
COMPARED = ("baseline", "oshot", "full-oshot")
BUDGET_S = 4 * 3600


def _done(d: Path) -> bool:
    return (d / pipeline.MANIFEST).exists()


def _num(v):
    return None if v in ("", None) else float(v)


@pytest.fixture(scope="session")
def bench(tmp_path_factory):
    keep = os.environ.get("ONESHOT_BENCH_DIR")
    root = Path(keep) if keep else tmp_path_factory.mktemp("bench")
    torch.set_num_threads(1)
    rows, cks, cfgs = [], {}, {}
    for s in SEEDS:
        r = root / f"seed{s}"
        cfg = config.load(BENCH_CFG, {"seed": str(s)})
        cfgs[s] = cfg
        if not _done(r / "data"):
            pipeline.gen_data(cfg, r, overwrite=True)
        for v in ("baseline", "oshot", "tran-oshot", "full-oshot"):
            d = pipeline.train_dir(r, v, s)
            if not _done(d):
                warm = str(cks[(s, "tran-oshot")]) if v == "full-oshot" else ""
                pipeline.cmd_train(dataclasses.replace(cfg, variant=v, warm_start=warm), r, overwrite=True)
            cks[(s, v)] = d / "checkpoint.npz"
        ev = r / "eval" / "bench"
        if not _done(ev):
            pipeline.cmd_adapt_eval(cfg, r, [str(cks[(s, v)]) for v in COMPARED], "bench", overwrite=True)
        rows += pipeline.read_metrics([ev / "metrics.csv"])
    r0 = root / "seed0"
    cdir = r0 / "curve" / "oshot"
    if not _done(cdir):
        pipeline.cmd_curve(cfgs[0], r0, str(cks[(0, "oshot")]), "oshot", overwrite=True)
    curve = pipeline.read_metrics([cdir / "curve.csv"])
    seconds = sum(pipeline.RunManifest.read(m.parent).timings.get("total_s", 0.0)
                  for m in root.rglob(pipeline.MANIFEST))
    return {"root": root, "rows": rows, "curve": curve, "cks": cks, "cfg": cfgs[0], "seconds": seconds}


def _mean(rows, variant, gamma, domain=None):
    vals = [float(r["mAP"]) for r in rows
            if r["variant"] == variant and int(r["gamma"]) == gamma and (domain is None or r["domain"] == domain)]
    return 100 * float(np.mean(vals))


# ---------------------------------------------------------------------------
# 1-3: benchmark directions


def test_c1_adaptation_gain(bench, record):
    rows = bench["rows"]
    o0, o5, f5 = _mean(rows, "oshot", 0), _mean(rows, "oshot", 5), _mean(rows, "full-oshot", 5)
    gain = o5 - o0
    minutes = bench["seconds"] / 60
    ok = gain >= 1.0 and f5 >= o5 and bench["seconds"] <= BUDGET_S
    record(1, ok, f"OSHOT mAP g0 {o0:.2f} g5 {o5:.2f} gain {gain:+.2f} pts (need >= +1.00); "
                  f"FULL-OSHOT g5 {f5:.2f} vs OSHOT g5 {o5:.2f} (need >=); "
                  f"benchmark {minutes:.0f} CPU-min (budget {BUDGET_S // 60})")
    assert ok


def test_c2_pretraining_generalization(bench, record):
    rows = bench["rows"]
    domains = sorted({r["domain"] for r in rows})
    b0, o0 = _mean(rows, "baseline", 0), _mean(rows, "oshot", 0)
    wins = [d for d in domains if _mean(rows, "oshot", 0, d) >= _mean(rows, "baseline", 0, d)]
    per = ", ".join(f"{d} {_mean(rows, 'oshot', 0, d):.1f}/{_mean(rows, 'baseline', 0, d):.1f}" for d in domains)
    ok = o0 >= b0 - 0.5 and len(wins) >= 2
    record(2, ok, f"OSHOT g0 {o0:.2f} vs Baseline {b0:.2f} (need >= {b0 - 0.5:.2f}); "
                  f"OSHOT >= Baseline on {len(wins)}/{len(domains)} targets (need 2) [{per}]")
    assert ok


def test_c3_iterations_plateau(bench, record):
    curve = bench["curve"]
    gaps = {}
    for d in sorted({r["domain"] for r in curve}):
        m = {int(r["gamma"]): _num(r["mAP"]) for r in curve if r["domain"] == d}
        if m.get(30) is not None and m.get(50) is not None:
            gaps[d] = 100 * abs(m[30] - m[50])
    ok = any(g < 0.5 for g in gaps.values())
    record(3, ok, "|mAP(30) - mAP(50)| per target: " + ", ".join(f"{d} {g:.2f}" for d, g in gaps.items())
           + " pts (need < 0.5 on one)")
    assert ok


# ---------------------------------------------------------------------------
# 4 and 10: adaptation on 100 shifted-target images


@pytest.fixture(scope="session")
def adapted(bench):
    ck = Checkpoint.load(bench["cks"][(0, "oshot")])
    cfg = bench["cfg"]
    root = bench["root"] / "seed0"
    acfg = AdaptConfig(gamma=cfg.gamma, inner_lr=cfg.adapt_config().inner_lr, seed=cfg.seed, eval_rotation_loss=True)
    first, *rest = cfg.domains
    images = pipeline.load_split(root, first, cfg.domains)
    before = {k: v.numpy().tobytes() for k, v in select(ck.params, "theta_d").items()}
    changed, traces = 0, {}
    traces[first] = []
    for im in images:
        res = adapt_one(im, ck, acfg, image_id=im.id)
        after = {k: v.numpy().tobytes() for k, v in select(ck.params, "theta_d").items()}
        changed += after != before or any(k.startswith("d.") for k in res.theta_f)
        traces[first].append(res.trace)
    for d in rest:
        traces[d] = [o.trace for o in adapt_batch(pipeline.load_split(root, d, cfg.domains), ck, acfg)]
    val = pipeline.load_split(root, "val")
    x = to_tensor([im.pixels for im in val])
    acc = rotself.rotation_accuracy(ck.params, x, [im.labels[0].box for im in val], ck.arch)
    return {"first": first, "n": len(images), "changed": changed, "traces": traces, "rot_acc": acc}


def test_c4_theta_d_immutable(adapted, record):
    ok = adapted["changed"] == 0 and adapted["n"] == 100
    record(4, ok, f"theta_d byte-changes after adapt_one: {adapted['changed']} of {adapted['n']} "
                  f"{adapted['first']} images (need 0 of 100)")
    assert ok


def test_c10_rotation_loss_descent(adapted, record):
    fracs = {d: float(np.mean([t.final_mean_loss < t.initial_mean_loss for t in ts]))
             for d, ts in adapted["traces"].items()}
    ok = all(f >= 0.9 for f in fracs.values()) and adapted["rot_acc"] >= 0.9
    record(10, ok, "L_r(5) < L_r(0) on " + ", ".join(f"{d} {100 * f:.0f}%" for d, f in fracs.items())
           + f" of images (need >= 90% each); source rotation accuracy {100 * adapted['rot_acc']:.1f}% (need >= 90%)")
    assert ok


# ---------------------------------------------------------------------------
# 5-9: oracle suites


def test_c5_pseudoboxcrop_commutation(record):
    rng = np.random.default_rng(5)
    values = torch.randn(8, 12, 12, generator=torch.Generator().manual_seed(5), dtype=torch.float64)
    worst = 0.0
    for _ in range(200):
        x1, y1 = rng.uniform(0, 94, size=2)
        box = (float(x1), float(y1), float(rng.uniform(x1 + 1, 96)), float(rng.uniform(y1 + 1, 96)))
        q = int(rng.integers(4))
        got = pseudoboxcrop(rotate_tensor(values, q), box, q, 5, stride=8)
        ref = rotate_tensor(boxcrop(values, box, 5, stride=8), q)
        worst = max(worst, float((got - ref).abs().max()))
    ok = worst < 1e-6
    record(5, ok, f"200 (box, q) cases, max |delta| {worst:.2e} (need < 1e-6)")
    assert ok


def test_c6_rotate_box_mask_oracle(record):
    rng = np.random.default_rng(6)
    W, H = 100, 50
    bad = 0
    for _ in range(500):
        x1, x2 = sorted(rng.choice(W + 1, size=2, replace=False))
        y1, y2 = sorted(rng.choice(H + 1, size=2, replace=False))
        for q in range(4):
            got = tuple(int(v) for v in rotate_box((x1, y1, x2, y2), q, W, H))
            bad += got != tuple(int(v) for v in mask_bbox_after_rotation((x1, y1, x2, y2), q, W, H))
    ok = bad == 0
    record(6, ok, f"500 boxes x 4 rotations, {bad} mismatches with the mask oracle (need 0)")
    assert ok


def test_c7_meta_gradient_finite_differences(record):
    errs = {}
    nparams = None
    for eta in (1, 2, 5):
        p, xs, tgt, qs = _toy_problem(eta)
        nparams = sum(v.numel() for v in p.values())
        names = [k for k in p if k.startswith(("f.", "d."))]
        errs[eta] = fd_check(p, lambda pp: meta_objective(pp, xs, tgt, qs, 0.1, TOY_ARCH), names, n_coords=16)
    ok = all(e < 1e-4 for e in errs.values()) and nparams <= 1000
    record(7, ok, f"toy model {nparams} params, float64, rel err " + ", ".join(f"eta={k}: {v:.1e}" for k, v in errs.items())
           + " (need < 1e-4)")
    assert ok


def test_c8_map_oracles(record):
    worst = 0.0
    for dets, gts, cls, expected in HAND_SCENES.values():
        worst = max(worst, abs(average_precision(dets, gts, cls) - float(expected)))
    rng = np.random.default_rng(8)
    scale_fail = 0
    for _ in range(200):
        n_img = int(rng.integers(1, 4))
        dets, gts = [], []
        for _ in range(n_img):
            g = []
            for _ in range(int(rng.integers(1, 4))):
                x, y = rng.integers(0, 60, size=2)
                g.append((int(rng.integers(2)), (int(x), int(y), int(x + rng.integers(5, 30)), int(y + rng.integers(5, 30)))))
            gts.append(g)
            ds = []
            for _ in range(int(rng.integers(0, 6))):
                c, (x1, y1, x2, y2) = g[int(rng.integers(len(g)))]
                jitter = rng.integers(-4, 5, size=4)
                box = (x1 + jitter[0], y1 + jitter[1], max(x2 + jitter[2], x1 + jitter[0] + 1),
                       max(y2 + jitter[3], y1 + jitter[1] + 1))
                ds.append(D(int(rng.integers(2)), box, float(rng.uniform(0.01, 1.0))))
            dets.append(ds)
        base = mean_average_precision(dets, gts)
        for factor in (0.5, 0.25, 1e-3):
            scaled = [[D(d.class_id, d.box, d.score * factor) for d in ds] for ds in dets]
            scale_fail += mean_average_precision(scaled, gts) != base
    ok = len(HAND_SCENES) >= 10 and worst < 1e-9 and scale_fail == 0
    record(8, ok, f"{len(HAND_SCENES)} hand scenes, max |AP - enumerated| {worst:.1e} (need < 1e-9); "
                  f"score scaling changed mAP in {scale_fail} of 600 cases (need 0)")
    assert ok


def test_c9_tide_categories(record):
    bad = []
    for name, (dets, gts, expected) in TIDE_CASES.items():
        eb, labels = tide_decompose([dets], [gts], per_detection=True)
        fps = [v for v in labels.values() if v is not None]
        want = [] if expected is None else [expected]
        miss = sum(1 for i, (c, g) in enumerate(gts) if not any(
            _iou(d.box, g) >= 0.1 for d in dets))
        if fps != want or eb.counts["Miss"] != miss:
            bad.append(name)
    dets = [D(0, (0, 0, 20, 20), 0.9), D(0, (0, 0, 19, 20), 0.85), D(0, (40, 40, 60, 58), 0.8),
            D(1, (40, 40, 50, 50), 0.7), D(0, (30, 70, 40, 80), 0.6), D(1, (70, 0, 80, 10), 0.5)]
    gts = [(0, (0, 0, 20, 20)), (1, (40, 40, 60, 60)), (0, (70, 0, 90, 20)), (1, (0, 60, 20, 80))]
    eb, labels = tide_decompose([dets], [gts], per_detection=True)
    if [labels[(0, j)] for j in range(6)] != [None, "Dupe", "Cls", "Loc", "Bkg", "Both"]:
        bad.append("combined-labels")
    if eb.counts != {c: 1 for c in ERROR_CATEGORIES}:
        bad.append("combined-counts")
    ok = not bad
    record(9, ok, f"{len(TIDE_CASES)} single-category scenes + 6-way combined scene, mismatches: {bad or 'none'}")
    assert ok


def _iou(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


# ---------------------------------------------------------------------------
# 11: end-to-end determinism

MINI = """
arch = mini
image_size = 32
num_classes = 2
min_object_size = 8
max_object_size = 14
max_objects = 2
n_train = 12
n_val = 4
n_target = 6
domains = fog,clipart,noisy
epochs = 2
batch_size = 6
lr = 0.01
meta_images = 3
gamma = 2
gamma_list = 0,1,2,3
seed = 11
"""


def _pipeline(root: Path, cfg_path: Path) -> float:
    t0 = time.perf_counter()
    base = ["--config", str(cfg_path), "--out", str(root)]
    steps = [["gen-data"], ["train", "--variant", "baseline"], ["train"], ["train", "--variant", "tran-oshot"],
             ["train", "--variant", "full-oshot", "--warm-start", str(root / "train" / "tran-oshot-s11" / "checkpoint.npz")]]
    cks = [str(root / "train" / f"{v}-s11" / "checkpoint.npz") for v in COMPARED]
    steps.append(["adapt-eval", "--curve"] + [a for c in cks for a in ("--checkpoint", c)])
    steps.append(["curve", "--checkpoint", cks[1]])
    steps.append(["report"])
    for step in steps:
        assert cli.run([step[0], *base, *step[1:]]) == 0, step
    return time.perf_counter() - t0


def _csv_cells(path: Path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_c11_pipeline_determinism(tmp_path, record):
    cfg_path = tmp_path / "mini.cfg"
    cfg_path.write_text(MINI)
    a, b = tmp_path / "a", tmp_path / "b"
    _pipeline(a, cfg_path)
    _pipeline(b, cfg_path)
    files = sorted(p.relative_to(a) for p in a.rglob("*.csv"))
    worst, mismatched = 0.0, []
    for rel in files:
        ra, rb = _csv_cells(a / rel), _csv_cells(b / rel)
        if len(ra) != len(rb) or any(len(x) != len(y) for x, y in zip(ra, rb)):
            mismatched.append(str(rel))
            continue
        for x, y in zip(ra, rb):
            for u, v in zip(x, y):
                try:
                    fu, fv = float(u), float(v)
                except ValueError:
                    if u != v:
                        mismatched.append(str(rel))
                    continue
                if not (math.isnan(fu) and math.isnan(fv)):
                    worst = max(worst, abs(fu - fv))
    ok = bool(files) and not mismatched and worst <= 1e-6 and \
        sorted(p.relative_to(b) for p in b.rglob("*.csv")) == files
    record(11, ok, f"{len(files)} CSVs from two single-threaded runs, max |delta| {worst:.1e} (need <= 1e-6), "
                   f"structural mismatches: {mismatched or 'none'}")
    assert ok
