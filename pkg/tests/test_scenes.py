from __future__ import annotations

import json
import math
from dataclasses import replace

import numpy as np
import pytest

from objdecomp.geometry import miou
from objdecomp.scenes import (
    FOREGROUND_REGIONS,
    REGION_NAMES,
    STRADDLE_CLASS,
    DatasetIOError,
    DatasetVersionError,
    SceneConfigError,
    SceneSpec,
    build_masks,
    generate_scene,
    load_dataset,
    load_manifest,
    object_sdf,
    object_surface_points,
    save_dataset,
    split_views,
)

SMALL = SceneSpec(n_views=6, image_size=24)


@pytest.fixture(scope="module")
def default_scene():
    return generate_scene(SceneSpec())


@pytest.fixture(scope="module")
def small_with_masks():
    ds, statuses = build_masks(generate_scene(SMALL), k=16)
    assert statuses == ["ok"] * SMALL.n_views
    return ds


def test_projected_disc_area():
    # a sphere subtending 30 degrees from distance 3: radius 3 sin 15deg
    r = 3 * math.sin(math.radians(15))
    spec = SceneSpec(object_radius=r, elevation_deg=0.0, n_views=2, image_size=96, fov_deg=45.0,
                     plane_z=-0.95, test_fraction=0.0)
    ds = generate_scene(spec)
    f = ds.cameras[0].fx
    expected = math.pi * (f * math.tan(math.radians(15))) ** 2
    for mask in ds.masks_gt:
        assert abs(mask.sum() / expected - 1) <= 0.02


def test_generation_is_deterministic():
    a, b = generate_scene(SMALL), generate_scene(SMALL)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.masks_gt, b.masks_gt)
    assert all(np.array_equal(x.descriptors, y.descriptors) and np.array_equal(x.saliency, y.saliency)
               for x, y in zip(a.descriptors, b.descriptors))


def test_seed_changes_descriptors_not_images():
    a, b = generate_scene(SMALL), generate_scene(replace(SMALL, seed=1))
    assert np.array_equal(a.images, b.images)
    assert not np.array_equal(a.descriptors[0].descriptors, b.descriptors[0].descriptors)


def test_gt_mask_matches_depth(default_scene):
    ds = default_scene
    np.testing.assert_array_equal(ds.masks_gt, ds.depth[:, 0] < ds.depth[:, 1])
    fg_regions = np.isin(ds.regions, FOREGROUND_REGIONS)
    np.testing.assert_array_equal(fg_regions, ds.masks_gt)


def test_default_split_is_20_train_8_test(default_scene):
    ds = default_scene
    assert len(ds.train_idx) == 20 and len(ds.test_idx) == 8
    assert sorted(ds.train_idx + ds.test_idx) == list(range(28))
    assert 0 in ds.train_idx


@pytest.mark.parametrize("n, frac", [(28, 0.3), (10, 0.5), (7, 0.0), (5, 0.2)])
def test_split_is_disjoint_and_exhaustive(n, frac):
    train, test = split_views(n, frac)
    assert not set(train) & set(test) and sorted(train + test) == list(range(n))
    assert len(test) == round(frac * n)


def test_straddle_class_spans_fg_and_bg_in_every_view():
    ds = generate_scene(replace(SceneSpec(straddle=True), n_views=12))
    # synthetic appearance classes: the straddling pair shares one class, other regions are their own
    classes = [STRADDLE_CLASS] + [(r,) for r in range(len(REGION_NAMES)) if r not in STRADDLE_CLASS]
    for view in range(ds.n_views):
        spanning = [c for c in classes
                    if (np.isin(ds.regions[view], c) & ds.masks_gt[view]).any()
                    and (np.isin(ds.regions[view], c) & ~ds.masks_gt[view]).any()]
        assert spanning == [STRADDLE_CLASS]


def test_masks_recover_gt_on_every_view(default_scene):
    ds, statuses = build_masks(default_scene)
    assert set(statuses) == {"ok"}
    for m, gt in zip(ds.masks, ds.masks_gt):
        assert miou(m.coarse, gt) >= 0.99


def test_invalid_specs_are_rejected():
    with pytest.raises(SceneConfigError):
        SceneSpec(object_kind="torus")
    with pytest.raises(SceneConfigError):
        generate_scene(replace(SMALL, object_radius=1.2))  # escapes the annotation sphere
    with pytest.raises(SceneConfigError):
        generate_scene(replace(SMALL, cam_radius=0.2))  # camera inside the object
    with pytest.raises(SceneConfigError):
        SceneSpec.from_dict({"n_views": 4, "colour": 1})


def test_spec_dict_round_trip():
    spec = replace(SceneSpec(), object_kind="union", straddle=True)
    assert SceneSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


@pytest.mark.parametrize("kind", ["sphere", "box", "union"])
def test_surface_points_lie_on_object(kind):
    spec = replace(SceneSpec(), object_kind=kind, object_radius=0.3)
    pts = object_surface_points(spec, 500)
    assert np.abs(object_sdf(spec, pts)).max() < 1e-9


@pytest.mark.parametrize("changes", [{"background": "bowl"}, {"object_kind": "box", "object_radius": 0.3},
                                     {"shadows": True, "object_texture": "stripes"}])
def test_scene_variants_render(changes):
    ds = generate_scene(replace(SMALL, **changes))
    assert ds.masks_gt.any() and (~ds.masks_gt).any()
    assert ds.images.dtype == np.uint8


# ---------------------------------------------------------------- persistence


def test_save_load_round_trip(tmp_path, small_with_masks):
    ds = small_with_masks
    save_dataset(ds, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    assert back.spec == ds.spec and back.train_idx == ds.train_idx and back.test_idx == ds.test_idx
    for name in ("images", "masks_gt", "depth", "regions"):
        assert np.array_equal(getattr(back, name), getattr(ds, name)), name
    for a, b in zip(back.cameras, ds.cameras):
        assert np.array_equal(a.c2w, b.c2w) and a.fx == b.fx
    for a, b in zip(back.descriptors, ds.descriptors):
        assert np.array_equal(a.descriptors, b.descriptors) and np.array_equal(a.saliency, b.saliency)
    for a, b in zip(back.masks, ds.masks):
        assert np.array_equal(a.coarse, b.coarse) and np.array_equal(a.clusters, b.clusters)
    assert back.mask_params == ds.mask_params


def test_save_is_byte_deterministic(tmp_path, small_with_masks):
    save_dataset(small_with_masks, tmp_path / "a")
    save_dataset(small_with_masks, tmp_path / "b")
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes(), f


def test_missing_mask_file_is_named(tmp_path, small_with_masks):
    root = save_dataset(small_with_masks, tmp_path / "ds")
    (root / "masks_coarse" / "0003.png").unlink()
    with pytest.raises(DatasetIOError, match="masks_coarse/0003.png"):
        load_dataset(root)


def test_newer_major_version_is_rejected(tmp_path, small_with_masks):
    root = save_dataset(small_with_masks, tmp_path / "ds")
    manifest = json.loads((root / "manifest.json").read_text())
    manifest["version"] = "2.0"
    (root / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(DatasetVersionError, match="2.0"):
        load_manifest(root)


def test_missing_directory_is_io_error(tmp_path):
    with pytest.raises(DatasetIOError, match="manifest.json"):
        load_dataset(tmp_path / "nothing")
