import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oneshot_det.synthgen import (
    AUGMENT_KINDS,
    ConfigError,
    DEFAULT_TARGET_DOMAINS,
    DomainSpec,
    SceneSpec,
    apply_domain_shift,
    augment,
    dataset_checksum,
    generate_dataset,
    generate_scene,
    labels_json,
    read_dataset,
    rotate,
    rotate_box,
    write_dataset,
)


def mask_bbox_after_rotation(box, q, W, H):
    """Oracle: rasterise the box, rotate the mask, take its bounding box."""
    m = np.zeros((H, W), dtype=bool)
    x1, y1, x2, y2 = box
    m[y1:y2, x1:x2] = True
    r = np.rot90(m, q)
    rows, cols = np.nonzero(r)
    return (cols.min(), rows.min(), cols.max() + 1, rows.max() + 1)


@pytest.fixture(scope="module")
def scene():
    return generate_scene(SceneSpec(), 3)


def test_single_object_spec_gives_one_label():
    img = generate_scene(SceneSpec(min_objects=1, max_objects=1), 0)
    assert len(img.labels) == 1


def test_generation_is_deterministic():
    a = generate_scene(SceneSpec(), 12345)
    b = generate_scene(SceneSpec(), 12345)
    assert np.array_equal(a.pixels, b.pixels)
    assert a.labels == b.labels


def test_class_frequencies_near_uniform():
    spec = SceneSpec()
    counts = Counter(lb.class_id for s in range(100) for lb in generate_scene(spec, s).labels)
    total = sum(counts.values())
    expected = total / spec.num_classes
    for c in range(spec.num_classes):
        assert abs(counts[c] - expected) <= 0.2 * expected, counts


@pytest.mark.parametrize("style", ["gradient", "ground-strip"])
def test_labels_valid_and_cover_rendered_object(style):
    spec = SceneSpec(background_style=style)
    for s in range(20):
        img = generate_scene(spec, s)
        assert img.pixels.shape == (96, 96, 3)
        assert img.pixels.dtype == np.float32
        assert 0.0 <= img.pixels.min() and img.pixels.max() <= 1.0
        assert spec.min_objects <= len(img.labels) <= spec.max_objects
        for lb in img.labels:
            assert 0 <= lb.x1 < lb.x2 <= 96 and 0 <= lb.y1 < lb.y2 <= 96
            assert 0 <= lb.class_id < spec.num_classes


def test_pixels_survive_png_quantisation(scene):
    requantised = (np.round(scene.pixels.astype(np.float64) * 255) / 255).astype(np.float32)
    assert np.array_equal(requantised, scene.pixels)


def test_over_dense_spec_is_rejected():
    spec = SceneSpec(image_size=32, min_objects=4, max_objects=4, min_object_size=24, max_object_size=26)
    with pytest.raises(ConfigError):
        generate_scene(spec, 0)


def test_invalid_spec_rejected():
    with pytest.raises(ConfigError):
        generate_scene(SceneSpec(image_size=90), 0)


def test_gradient_background_is_brighter_on_top():
    spec = SceneSpec(min_objects=1, max_objects=1, min_object_size=8, max_object_size=8)
    for s in range(10):
        px = generate_scene(spec, s).pixels
        assert px[:10].mean() > px[-10:].mean()


# ---------------------------------------------------------------------------
# domain shifts


def test_empty_chain_is_identity(scene):
    out = apply_domain_shift(scene, DomainSpec("source"))
    assert np.array_equal(out.pixels, scene.pixels)


def test_full_density_fog_moves_every_pixel_toward_fog_colour(scene):
    fog = np.array([0.85, 0.85, 0.88])
    out = apply_domain_shift(scene, DomainSpec("f", (("fog", {"density": 1.0, "color": tuple(fog)}),)))
    before = np.abs(scene.pixels - fog)
    after = np.abs(out.pixels - fog)
    assert np.all(after <= before + 1.0 / 255)
    far = before > 0.05
    assert np.all(after[far] < before[far])
    assert np.abs(out.pixels - scene.pixels).mean() > 0


@pytest.mark.parametrize("domain", DEFAULT_TARGET_DOMAINS, ids=lambda d: d.name)
def test_shifts_keep_labels_and_are_deterministic(scene, domain):
    a = apply_domain_shift(scene, domain)
    b = apply_domain_shift(scene, domain)
    assert labels_json(a.labels) == labels_json(scene.labels)
    assert np.array_equal(a.pixels, b.pixels)
    assert not np.array_equal(a.pixels, scene.pixels)


def test_palette_remap_keeps_labels(scene):
    out = apply_domain_shift(scene, DomainSpec("p", (("palette", {"hue_shift": 90.0}),)))
    assert labels_json(out.labels) == labels_json(scene.labels)


def test_unknown_transform_is_config_error(scene):
    with pytest.raises(ConfigError):
        apply_domain_shift(scene, DomainSpec("bad", (("sepia", {}),)))


def test_bad_transform_parameter_is_config_error(scene):
    with pytest.raises(ConfigError):
        apply_domain_shift(scene, DomainSpec("bad", (("fog", {"thickness": 1.0}),)))


# ---------------------------------------------------------------------------
# rotation


def test_rotate_identity(scene):
    assert np.array_equal(rotate(scene.pixels, 0), scene.pixels)


@pytest.mark.parametrize("q", range(4))
def test_rotate_inverse(scene, q):
    assert np.array_equal(rotate(rotate(scene.pixels, q), (4 - q) % 4), scene.pixels)


def test_rotate_one_hot_pixel():
    img = np.zeros((50, 100))
    img[5, 2] = 1.0
    out = rotate(img, 1)
    assert out.shape == (100, 50)
    ys, xs = np.nonzero(out)
    assert (xs[0], ys[0]) == (5, 97)


@given(st.integers(0, 3), st.integers(0, 3))
@settings(max_examples=30, deadline=None)
def test_rotation_group_law(q1, q2):
    img = np.arange(6 * 10 * 3).reshape(6, 10, 3)
    assert np.array_equal(rotate(rotate(img, q1), q2), rotate(img, (q1 + q2) % 4))


@pytest.mark.parametrize("q", [-1, 4, 1.5])
def test_rotate_rejects_bad_q(q):
    with pytest.raises(ValueError):
        rotate(np.zeros((4, 4)), q)


@pytest.mark.parametrize("q,expected", [
    (0, (10, 20, 30, 40)),
    (1, (20, 70, 40, 90)),
    (2, (70, 10, 90, 30)),
])
def test_rotate_box_examples(q, expected):
    assert rotate_box((10, 20, 30, 40), q, 100, 50) == expected
    assert mask_bbox_after_rotation((10, 20, 30, 40), q, 100, 50) == expected


def test_rotate_box_matches_mask_oracle_random():
    rng = np.random.default_rng(0)
    for _ in range(100):
        W, H = int(rng.integers(8, 40)), int(rng.integers(8, 40))
        x1, x2 = sorted(rng.choice(W + 1, 2, replace=False))
        y1, y2 = sorted(rng.choice(H + 1, 2, replace=False))
        for q in range(4):
            assert rotate_box((x1, y1, x2, y2), q, W, H) == mask_bbox_after_rotation((x1, y1, x2, y2), q, W, H)


def test_rotate_box_rejects_invalid_box():
    with pytest.raises(ValueError):
        rotate_box((5, 5, 5, 9), 1, 10, 10)
    with pytest.raises(ValueError):
        rotate_box((0, 0, 11, 5), 1, 10, 10)


# ---------------------------------------------------------------------------
# augmentation


def test_identity_augmentation(scene):
    assert np.array_equal(augment(scene, "identity", 99).pixels, scene.pixels)


def test_grayscale_channels_equal(scene):
    px = augment(scene, "grayscale", 0).pixels
    assert np.array_equal(px[..., 0], px[..., 1]) and np.array_equal(px[..., 1], px[..., 2])


@pytest.mark.parametrize("kind", AUGMENT_KINDS)
def test_augment_deterministic_and_label_preserving(scene, kind):
    a = augment(scene, kind, 7)
    b = augment(scene, kind, 7)
    assert np.array_equal(a.pixels, b.pixels)
    assert labels_json(a.labels) == labels_json(scene.labels)


def test_augment_rejects_unknown_kind(scene):
    with pytest.raises(ValueError):
        augment(scene, "solarize", 0)


# ---------------------------------------------------------------------------
# on-disk datasets


def test_dataset_round_trip(tmp_path):
    images = generate_dataset(SceneSpec(), 5, seed=1)
    root = write_dataset(tmp_path / "src", images, meta={"seed": 1})
    back = read_dataset(root)
    assert [im.id for im in back] == [im.id for im in images]
    for a, b in zip(images, back):
        assert np.array_equal(a.pixels, b.pixels)
        assert a.labels == b.labels
    rec = json.loads((root / "annotations.jsonl").read_text().splitlines()[0])
    assert set(rec) >= {"id", "file", "width", "height", "labels"}
    assert set(rec["labels"][0]) == {"class", "x1", "y1", "x2", "y2"}
    assert (root / "dataset.meta").exists()


def test_dataset_regeneration_checksum_identical(tmp_path):
    a = write_dataset(tmp_path / "a", generate_dataset(SceneSpec(), 4, seed=5))
    b = write_dataset(tmp_path / "b", generate_dataset(SceneSpec(), 4, seed=5))
    assert dataset_checksum(a) == dataset_checksum(b)


def test_dataset_write_refuses_overwrite(tmp_path):
    images = generate_dataset(SceneSpec(), 2, seed=0)
    write_dataset(tmp_path / "d", images)
    with pytest.raises(FileExistsError):
        write_dataset(tmp_path / "d", images)
    write_dataset(tmp_path / "d", images, overwrite=True)


def test_scene_seed_depends_on_id_not_order():
    a = generate_dataset(SceneSpec(), 6, seed=2)
    b = generate_dataset(SceneSpec(), 3, seed=2)
    for x, y in zip(a, b):
        assert np.array_equal(x.pixels, y.pixels)
