import dataclasses

import numpy as np
import pytest
import torch

from oneshot_det import rotself
from oneshot_det.adapt import AdaptConfig, adapt_batch, adapt_one, predict, read_predictions, write_predictions
from oneshot_det.checkpoint import MissingGroupError
from oneshot_det.detcore import MINI_ARCH, TrainingFault
from oneshot_det.synthgen import DEFAULT_TARGET_DOMAINS, SceneSpec, generate_dataset, shift_dataset
from oneshot_det.train import TrainConfig, pretrain_multitask

MINI_SPEC = SceneSpec(image_size=32, num_classes=2, min_object_size=8, max_object_size=14, max_objects=2)


@pytest.fixture(scope="module")
def ckpt():
    src = generate_dataset(MINI_SPEC, 16, seed=0)
    return pretrain_multitask(src, TrainConfig(variant="oshot", epochs=3, batch_size=4, lr=1e-2), MINI_ARCH)


@pytest.fixture(scope="module")
def targets():
    return shift_dataset(generate_dataset(MINI_SPEC, 6, seed=1, split="val"), DEFAULT_TARGET_DOMAINS[0])


def _bytes(params, prefix):
    return {k: v.numpy().tobytes() for k, v in params.items() if k.startswith(prefix)}


def test_gamma_zero_is_identity(ckpt, targets):
    img = targets[0]
    res = adapt_one(img, ckpt, AdaptConfig(gamma=0))
    assert res.trace.rot_loss == []
    assert all(torch.equal(res.theta_f[k], ckpt.params[k]) for k in res.theta_f)
    assert predict(img, res.theta_f, ckpt) == predict(img, None, ckpt)


def test_trace_and_parameters(ckpt, targets):
    d_before = _bytes(ckpt.params, "d.")
    r_before = _bytes(ckpt.params, "r.")
    f_before = _bytes(ckpt.params, "f.")
    res = adapt_one(targets[1], ckpt, AdaptConfig(gamma=4, inner_lr=0.05))
    assert len(res.trace.rot_loss) == 4 and len(res.trace.qs) == 4 and len(res.trace.pseudo_boxes) == 4
    assert set(res.trace.qs) <= {0, 1, 2, 3}
    assert all(np.isfinite(res.trace.rot_loss))
    assert _bytes(ckpt.params, "d.") == d_before
    assert _bytes(ckpt.params, "r.") == r_before
    assert _bytes(ckpt.params, "f.") == f_before
    assert set(res.theta_f) == set(k for k in ckpt.params if k.startswith("f."))
    assert not all(torch.equal(res.theta_f[k], ckpt.params[k]) for k in res.theta_f)
    assert not all(torch.equal(res.theta_r[k], ckpt.params[k]) for k in res.theta_r)


def test_rotation_stream_keyed_by_seed_and_image(ckpt, targets):
    a = adapt_one(targets[2], ckpt, AdaptConfig(gamma=6))
    b = adapt_one(targets[2], ckpt, AdaptConfig(gamma=6))
    assert a.trace.qs == b.trace.qs and a.trace.rot_loss == b.trace.rot_loss
    assert all(torch.equal(a.theta_f[k], b.theta_f[k]) for k in a.theta_f)
    streams = {tuple(adapt_one(targets[2], ckpt, AdaptConfig(gamma=6, seed=s)).trace.qs) for s in range(4)}
    assert len(streams) > 1


def test_snapshots_equal_shorter_runs(ckpt, targets):
    img = targets[3]
    long, snaps = adapt_one(img, ckpt, AdaptConfig(gamma=6, inner_lr=0.05), snapshot_at=[0, 2, 6])
    for g in (0, 2, 6):
        short = adapt_one(img, ckpt, AdaptConfig(gamma=g, inner_lr=0.05))
        assert all(torch.equal(snaps[g][k], short.theta_f[k]) for k in short.theta_f)
    assert all(torch.equal(snaps[6][k], long.theta_f[k]) for k in long.theta_f)


def test_batch_is_order_and_worker_independent(ckpt, targets):
    cfg = AdaptConfig(gamma=3, inner_lr=0.05)
    ref = {o.image_id: o.detections for o in adapt_batch(targets, ckpt, cfg)}
    perm = [targets[i] for i in (4, 0, 5, 2, 1, 3)]
    shuffled = adapt_batch(perm, ckpt, cfg)
    assert [o.image_id for o in shuffled] == [im.id for im in perm]
    assert {o.image_id: o.detections for o in shuffled} == ref
    threaded = adapt_batch(targets, ckpt, cfg, workers=3)
    assert {o.image_id: o.detections for o in threaded} == ref


def test_adaptation_is_source_free(ckpt, targets, monkeypatch):
    import oneshot_det.synthgen as sg

    def forbidden(*a, **k):
        raise AssertionError("source data accessed during adaptation")

    for name in ("generate_dataset", "generate_scene", "read_dataset"):
        monkeypatch.setattr(sg, name, forbidden)
    adapt_batch(targets[:2], ckpt, AdaptConfig(gamma=2))


def test_fault_returns_unadapted_parameters(ckpt, targets, monkeypatch):
    def boom(*a, **k):
        raise TrainingFault("non-finite rotation loss")

    monkeypatch.setattr(rotself, "rotation_loss", boom)
    out = adapt_batch(targets[:1], ckpt, AdaptConfig(gamma=3))[0]
    assert out.trace.fault is not None
    assert out.detections == predict(targets[0], None, ckpt)


def test_eval_rotation_loss_records_endpoints(ckpt, targets):
    res = adapt_one(targets[0], ckpt, AdaptConfig(gamma=3, eval_rotation_loss=True))
    assert set(res.trace.mean_loss_at) == {0, 3}
    assert res.trace.initial_mean_loss > 0 and res.trace.final_mean_loss > 0
    _, snaps = adapt_one(targets[0], ckpt, AdaptConfig(gamma=3, eval_rotation_loss=True), snapshot_at=[1, 3])
    assert set(snaps) == {1, 3}


def test_invalid_inputs(ckpt, targets):
    with pytest.raises(ValueError):
        adapt_one(targets[0], ckpt, AdaptConfig(gamma=-1))
    partial = dataclasses.replace(ckpt, params={k: v for k, v in ckpt.params.items() if not k.startswith("r.")})
    with pytest.raises(MissingGroupError):
        adapt_one(targets[0], partial, AdaptConfig())


def test_raw_array_input(ckpt, targets):
    res = adapt_one(targets[0].pixels, ckpt, AdaptConfig(gamma=2))
    assert len(res.trace.rot_loss) == 2


def test_prediction_file_round_trip(ckpt, targets, tmp_path):
    out = adapt_batch(targets[:3], ckpt, AdaptConfig(gamma=2))
    path = write_predictions(tmp_path / "pred.jsonl", out)
    back = read_predictions(path)
    assert [r["image_id"] for r in back] == [o.image_id for o in out]
    assert [r["detections"] for r in back] == [o.detections for o in out]
    assert all(r["gamma"] == 2 and len(r["rot_loss_trace"]) == 2 for r in back)
