from __future__ import annotations

import json
from dataclasses import replace

import numpy as np
import pytest

from objdecomp.diffcore import tape as T
from objdecomp.fields import FieldConfig, SphereAnnotation
from objdecomp.geometry import chamfer_distance, sample_mesh_points, sample_sphere_points
from objdecomp.rendering import RenderConfig, SamplingConfig, generate_rays, render_rays
from objdecomp.scenes import SceneSpec, build_masks, generate_scene
from objdecomp.supervision import LossWeights, total_loss
from objdecomp.trainer import (
    Checkpoint,
    TrainConfig,
    TrainConfigError,
    TrainingAborted,
    ablation_mode,
    effective_weights,
    extract_object_mesh,
    init_checkpoint,
    loss_parts,
    render_views,
    train,
)

from .conftest import TINY_FIELDS, assert_grad_close, axial_camera, fd_gradient

TINY_SAMPLING = SamplingConfig(n_uniform=8, n_importance=4, importance_iters=1, n_outside=4)
TINY = TrainConfig(iters=6, stage2_start=3, rays=16, fields=TINY_FIELDS, sampling=TINY_SAMPLING,
                   warmup_iters=2, log_every=1)


@pytest.fixture(scope="module")
def small_ds():
    ds, _ = build_masks(generate_scene(SceneSpec(n_views=5, image_size=16)), k=8)
    return ds


# ---------------------------------------------------------------- configuration


def test_stage_gating_and_strategies():
    cfg = replace(TINY, stage2_start=3)
    w = cfg.weights
    assert effective_weights(cfg, 2) == (w, "stage1")
    assert effective_weights(cfg, 3) == (w, "stage2")
    s0, _ = effective_weights(ablation_mode(cfg, "s0"), 4)
    assert s0.seg == 0 and s0.cls == 0 and s0.color == w.color
    s1, stage = effective_weights(ablation_mode(cfg, "s1"), 4)
    assert s1.cls == 0 and s1.seg == w.seg and stage == "stage2"
    s2, stage = effective_weights(ablation_mode(cfg, "s2"), 0)
    assert s2.seg == 0 and s2.cls == w.cls and stage == "stage2"
    with pytest.raises(TrainConfigError):
        ablation_mode(cfg, "s4")


def test_config_validation_and_round_trip():
    with pytest.raises(TrainConfigError):
        TrainConfig(iters=-1)
    with pytest.raises(TrainConfigError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(TrainConfigError, match="weights"):
        TrainConfig.from_dict({"weights": {"colour": 1.0}})
    d = json.loads(json.dumps(TINY.to_dict()))
    assert TrainConfig.from_dict(d) == TINY
    # the hash ignores run length, so a longer run can resume a shorter one
    assert replace(TINY, iters=100).hash() == TINY.hash()
    assert replace(TINY, seed=1).hash() != TINY.hash()


# ---------------------------------------------------------------- training loop


def test_zero_iterations_returns_init_checkpoint(small_ds):
    cfg = replace(TINY, iters=0)
    ckpt, records = train(small_ds, cfg)
    init = init_checkpoint(cfg)
    assert records == [] and ckpt.iteration == 0
    for k in init.fg.params:
        assert np.array_equal(ckpt.fg.params[k], init.fg.params[k])


def test_training_requires_masks():
    with pytest.raises(TrainConfigError, match="masks"):
        train(generate_scene(SceneSpec(n_views=3, image_size=8)), TINY)


def test_cluster_term_is_gated_until_stage_two(small_ds):
    _, records = train(small_ds, TINY)
    assert [r["stage"] for r in records] == ["stage1"] * 3 + ["stage2"] * 3
    assert all(r["c_cls"] == 0.0 for r in records[:3])
    assert all(r["c_cls"] > 0.0 for r in records[3:])
    assert all(np.isfinite(r["total"]) for r in records)


def test_training_is_bitwise_deterministic(small_ds, tmp_path):
    a, ra = train(small_ds, TINY, out_dir=tmp_path / "a")
    b, rb = train(small_ds, TINY, out_dir=tmp_path / "b")
    assert ra == rb
    for name in ("metrics.jsonl", "ckpt.npz", "ckpt_stage1.npz"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_resume_matches_uninterrupted_run(small_ds):
    full, _ = train(small_ds, TINY)
    half, _ = train(small_ds, replace(TINY, iters=3))
    resumed, _ = train(small_ds, TINY, resume=half)
    for k in full.fg.params:
        assert np.array_equal(full.fg.params[k], resumed.fg.params[k]), k
    for k in full.bg.params:
        assert np.array_equal(full.bg.params[k], resumed.bg.params[k]), k


def test_checkpoint_round_trip_and_hash_mismatch(small_ds, tmp_path):
    ckpt, _ = train(small_ds, replace(TINY, iters=2))
    ckpt.save(tmp_path / "c.npz")
    back = Checkpoint.load(tmp_path / "c.npz")
    assert back.iteration == 2 and back.config == ckpt.config and back.config_hash == ckpt.config_hash
    for k in ckpt.fg.params:
        assert np.array_equal(back.fg.params[k], ckpt.fg.params[k])
    assert np.array_equal(back.adam_bg.m[next(iter(ckpt.bg.params))], ckpt.adam_bg.m[next(iter(ckpt.bg.params))])
    with pytest.raises(TrainConfigError, match="hash"):
        train(small_ds, replace(TINY, seed=5), resume=back)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_aborts_with_diagnostics(small_ds, tmp_path):
    # one step at lr 1e300 leaves huge but finite parameters; the next loss overflows
    cfg = replace(TINY, lr_max=1e300, warmup_iters=0)
    with pytest.raises(TrainingAborted) as info:
        train(small_ds, cfg, out_dir=tmp_path)
    err = info.value
    assert err.checkpoint.iteration == 1 and err.term in ("color", "eik", "fg", "seg", "cls")
    diag = json.loads((tmp_path / "diagnostics.json").read_text())
    assert diag == {"iteration": 1, "term": err.term, "message": diag["message"]}
    saved = Checkpoint.load(tmp_path / "ckpt.npz")
    one_step, _ = train(small_ds, replace(cfg, iters=1))
    assert saved.iteration == 1
    assert all(np.array_equal(saved.fg.params[k], one_step.fg.params[k]) for k in one_step.fg.params)


# ---------------------------------------------------------------- outputs


def test_render_views_shapes():
    ckpt = init_checkpoint(TINY)
    cam = axial_camera(size=6, f=6)
    (view,) = render_views(ckpt, [cam], SphereAnnotation(), RenderConfig(TINY_SAMPLING))
    assert view["color"].shape == (6, 6, 3) and view["fg_weight"].shape == (6, 6)
    assert view["background"].shape == (6, 6, 3)
    assert np.all(view["fg_weight"] <= view["weight"] + 1e-12)


def test_init_mesh_is_the_radius_half_sphere():
    ckpt = init_checkpoint(replace(TINY, fields=FieldConfig()))
    n = 48
    mesh = extract_object_mesh(ckpt, n)
    cd = chamfer_distance(sample_mesh_points(mesh, 5000, seed=0), sample_sphere_points(5000, 0.5, seed=1))
    assert cd <= 2 * (2.0 / (n - 1))


def test_positive_sdf_gives_empty_mesh(caplog):
    ckpt = init_checkpoint(TINY)
    last_b = sorted(k for k in ckpt.fg.params if k.startswith("sdf") and k.endswith(".b"))[-1]
    b = ckpt.fg.params[last_b].copy()
    b[0] += 10.0
    ckpt = replace(ckpt, fg=ckpt.fg.with_params(ckpt.fg.params.replace({last_b: b})))
    assert extract_object_mesh(ckpt, 16).is_empty
    assert "no zero crossing" in caplog.text


def test_total_loss_gradient_on_toy_rays(rng):
    """The whole chain (sampling fixed, render, all five terms) against finite differences."""
    cfg = replace(TINY, sampling=replace(TINY_SAMPLING, importance_iters=0))
    ckpt = init_checkpoint(cfg)
    cam = axial_camera(size=4, f=4)
    uv = np.array([[1.5, 1.5], [2.5, 2.0], [0.5, 3.5]])
    rays = generate_rays(cam, uv)
    gt = rng.uniform(size=(3, 3))
    coarse = np.array([True, False, True])
    labels = np.array([0, 0, 1])
    weights = LossWeights(color=1.0, eik=0.1, fg=0.01, seg=0.1, cls=0.1)

    def loss(p_fg, p_bg):
        res = render_rays(rays, ckpt.fg, ckpt.bg, cfg.render, seed=7, p_fg=p_fg, p_bg=p_bg)
        return total_loss(loss_parts(res, gt, coarse, labels, cfg), weights, "stage2")

    p_fg = ckpt.fg.params.tensors()
    p_bg = ckpt.bg.params.tensors()
    grads = T.gradient(loss(p_fg, p_bg), {"fg/" + k: v for k, v in p_fg.items()})
    # check a handful of small tensors end to end
    keys = sorted(ckpt.fg.params, key=lambda k: ckpt.fg.params[k].size)[:4]
    base = {k: ckpt.fg.params[k] for k in ckpt.fg.params}

    def value(sub):
        merged = {k: T.constant(sub.get(k, base[k])) for k in base}
        return float(loss(merged, {k: T.constant(v) for k, v in ckpt.bg.params.items()}).value)

    numeric = fd_gradient(value, {k: base[k] for k in keys}, h=1e-6)
    assert_grad_close({k: grads["fg/" + k] for k in keys}, numeric, rtol=1e-4, atol=1e-8)
