import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from oneshot_det import OneShotDetector
from oneshot_det.adapt import predict as plain_predict
from oneshot_det.detcore import MINI_ARCH, FeatureMap
from oneshot_det.synthgen import SceneSpec, generate_dataset
from oneshot_det.validation import check_box, check_dataset, check_image, check_labels

MINI_SPEC = SceneSpec(image_size=32, num_classes=2, min_object_size=8, max_object_size=14, max_objects=2)


@pytest.fixture(scope="module")
def data():
    return generate_dataset(MINI_SPEC, 10, seed=0), generate_dataset(MINI_SPEC, 4, seed=1, split="val")


@pytest.fixture(scope="module")
def fitted(data):
    return OneShotDetector(arch=MINI_ARCH, epochs=2, batch_size=5, lr=1e-2, gamma=2, adapt_lr=0.01).fit(data[0])


def test_params_round_trip_and_clone():
    est = OneShotDetector(variant="tran-oshot", gamma=3, lambda_rot=0.1)
    p = est.get_params()
    assert p["variant"] == "tran-oshot" and p["gamma"] == 3 and p["lambda_rot"] == 0.1
    c = clone(est)
    assert c.get_params() == p and c is not est
    est.set_params(gamma=7)
    assert est.gamma == 7


def test_not_fitted(data):
    with pytest.raises(NotFittedError):
        OneShotDetector().predict(data[1])


def test_fit_predict_score(fitted, data):
    val = data[1]
    dets = fitted.predict(val)
    assert len(dets) == len(val)
    s = fitted.score(val)
    assert 0.0 <= s <= 1.0
    assert len(fitted.metric_log_) == 2
    assert fitted.error_breakdown(val).fp_count >= 0


def test_gamma_zero_predict_is_plain_inference(fitted, data):
    val = data[1]
    got = fitted.predict(val, gamma=0)
    assert got == [plain_predict(im, None, fitted.checkpoint_) for im in val]


def test_transform_returns_feature_maps(fitted, data):
    maps = fitted.transform(data[1][:2])
    assert len(maps) == 2 and all(isinstance(m, FeatureMap) for m in maps)


def test_from_checkpoint(fitted, data, tmp_path):
    path = fitted.checkpoint_.save(tmp_path / "ck.npz")
    est = OneShotDetector.from_checkpoint(path, gamma=2, adapt_lr=0.01)
    assert est.predict(data[1]) == fitted.predict(data[1])


def test_fit_accepts_arrays_and_label_lists(data):
    imgs = [im.pixels for im in data[0]]
    ys = [[(lb.class_id, lb.box) for lb in im.labels] for im in data[0]]
    est = OneShotDetector(arch=MINI_ARCH, epochs=1, batch_size=5, variant="baseline").fit(imgs, ys)
    assert "theta_r" not in est.checkpoint_.trained_groups


def test_invalid_hyperparameters_rejected(data):
    with pytest.raises(ValueError):
        OneShotDetector(arch=MINI_ARCH, K=0).fit(data[0])
    with pytest.raises(ValueError):
        OneShotDetector(arch=MINI_ARCH, gamma=-1).fit(data[0])


def test_validation_helpers():
    assert check_image(np.zeros((16, 8, 3), np.uint8)).dtype == np.float32
    with pytest.raises(ValueError):
        check_image(np.zeros((16, 8)))
    with pytest.raises(ValueError):
        check_image(np.zeros((12, 8, 3)))
    with pytest.raises(ValueError):
        check_image(np.full((8, 8, 3), 2.0))
    with pytest.raises(ValueError):
        check_box((5, 5, 5, 9))
    with pytest.raises(ValueError):
        check_labels([(3, (0, 0, 4, 4))], num_classes=2)
    with pytest.raises(ValueError):
        check_dataset([np.zeros((8, 8, 3))], y=[[], []])
    with pytest.raises(ValueError):
        check_dataset([np.zeros((8, 8, 3))], require_labels=True)
    one = check_dataset(np.zeros((8, 8, 3)))
    assert len(one) == 1 and one[0].labels == []
