import dataclasses
import json
import math

import numpy as np
import pytest
import torch

from affordheat.data_model import AnnotationRecord
from affordheat.model import AffordanceModel, ConfigError, ModelConfig
from affordheat.synthetic import DatasetConfig, SceneConfig, generate_dataset
from affordheat.targets import gaussian_target
from affordheat.trainer import (
    AUGMENTATIONS,
    TrainConfig,
    apply_ablation,
    augment,
    cosine_lr,
    crop_point,
    crop_resize,
    format_config,
    hflip,
    keyed_rng,
    load_checkpoint,
    parse_config_text,
    sample_target_frame,
    save_checkpoint,
    train,
)
from affordheat.video_encoder import build_clip_window

TINY = dict(frame_height=32, frame_width=32, patch=(2, 4, 4), enc_dims=(8, 16), enc_depths=(2, 1),
            enc_heads=(2, 2), slot_dim=4, cond_hidden=8, cond_dim=8, dec_dim=16, dec_depth=1,
            dec_heads=2)


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    scene = SceneConfig(height=32, width=32, n_frames=12, pre_action_frames=8,
                        quad_half_size=(2.0, 3.0), speed=(0.3, 0.5))
    return generate_dataset(out, DatasetConfig(n_cases=4, clips_per_case=2, ratios=(0.5, 0.25, 0.25),
                                               two_tool_fraction=0.0, seed=1, scene=scene))


def _rec(lo, hi):
    return AnnotationRecord(clip_id="c", case_id="k", split="train", surgery="cholecystectomy",
                            tool="hook", action="dissect", frame_count=40, frame_height=8,
                            frame_width=8, pre_action_start=lo, pre_action_end=hi,
                            keypoints=((1, 1), (5, 1), (5, 5), (1, 5)), frames_path="x")


def test_cosine_schedule_values():
    assert cosine_lr(0, 100, 1e-4) == 1e-4
    assert cosine_lr(50, 100, 1e-4) == pytest.approx(5e-5, abs=1e-18)
    assert cosine_lr(100, 100, 1e-4, 1e-6) == pytest.approx(1e-6, abs=1e-18)
    lrs = [cosine_lr(s, 30, 1.0) for s in range(31)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_sample_target_frame_single():
    rng = np.random.default_rng(0)
    assert {sample_target_frame(_rec(5, 5), rng) for _ in range(20)} == {5}


def test_sample_target_frame_uniform():
    rng = np.random.default_rng(0)
    draws = [sample_target_frame(_rec(0, 9), rng) for _ in range(10_000)]
    counts = np.bincount(draws, minlength=10)
    assert len(counts) == 10
    sd = math.sqrt(10_000 * 0.1 * 0.9)
    assert np.all(np.abs(counts - 1000) <= 4 * sd)


def test_sample_target_frame_empty_range():
    with pytest.raises(ValueError):
        sample_target_frame(dataclasses.replace(_rec(0, 0), pre_action_start=3, pre_action_end=2),
                            np.random.default_rng(0))


def test_keyed_rng_depends_on_all_keys():
    a = keyed_rng(0, 1, "c").random()
    assert a == keyed_rng(0, 1, "c").random()
    assert a != keyed_rng(1, 1, "c").random()
    assert a != keyed_rng(0, 2, "c").random()
    assert a != keyed_rng(0, 1, "d").random()


def _clip_and_target():
    frames = np.random.default_rng(0).integers(0, 256, (10, 32, 32, 3), dtype=np.uint8)
    return build_clip_window(frames, 9, 4, 2), gaussian_target((7.3, 20.1), 2.0, 32, 32)


def test_hflip_involution_and_centroid():
    clip, tgt = _clip_and_target()
    c2, t2 = hflip(clip, tgt)
    assert t2.centroid == pytest.approx((31 - 7.3, 20.1))
    assert np.unravel_index(t2.values.argmax(), t2.values.shape) == (20, 31 - 7)
    c3, t3 = hflip(c2, t2)
    assert np.array_equal(c3.frames, clip.frames) and np.array_equal(t3.values, tgt.values)
    assert t3.centroid == pytest.approx(tgt.centroid)


def test_crop_maps_centroid_consistently():
    clip, tgt = _clip_and_target()
    x0, y0, cw, ch = 2, 5, 26, 26
    c2, t2 = crop_resize(clip, tgt, x0, y0, cw, ch)
    want = crop_point(*tgt.centroid, x0, y0, cw, ch, 32, 32)
    assert math.dist(t2.centroid, want) <= 0.5
    assert c2.frames.shape == clip.frames.shape
    # a bright pixel moves where the point map says it should
    frames = np.zeros((1, 32, 32, 3), dtype=np.uint8)
    frames[0, 20, 10] = 255
    w = build_clip_window(frames, 0, 1, 1)
    c3, _ = crop_resize(w, tgt, x0, y0, cw, ch)
    py, px = np.unravel_index(c3.frames[0, :, :, 0].argmax(), (32, 32))
    ex, ey = crop_point(10, 20, x0, y0, cw, ch, 32, 32)
    assert abs(px - ex) <= 1.0 and abs(py - ey) <= 1.0


def test_augment_keeps_ranges_and_is_deterministic():
    clip, tgt = _clip_and_target()
    a = augment(clip, tgt, np.random.default_rng(3), AUGMENTATIONS)
    b = augment(clip, tgt, np.random.default_rng(3), AUGMENTATIONS)
    assert np.array_equal(a[0].frames, b[0].frames)
    assert a[0].frames.min() >= 0 and a[0].frames.max() <= 1
    assert a[1].values.max() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        augment(clip, tgt, np.random.default_rng(0), ("rotate",))


def test_ablation_presets_touch_one_component():
    t, m = apply_ablation(TrainConfig(ablation="no_tool"), ModelConfig())
    assert m.cond_mode == "no_tool" and t.window_N == TrainConfig().window_N
    t, m = apply_ablation(TrainConfig(ablation="no_history"), ModelConfig())
    assert t.window_N == 1 and m == ModelConfig()
    t, m = apply_ablation(TrainConfig(ablation="xattn_decoder"), ModelConfig())
    assert m.decoder == "xattn"


def test_config_parse_round_trip():
    t, m = parse_config_text("lr0 = 0.001  # fast\nbatch=4\naugment = hflip,crop\nenc_dims = 16,32\n",
                             overrides={"seed": "7"})
    assert (t.lr0, t.batch, t.augment, t.seed) == (1e-3, 4, ("hflip", "crop"), 7)
    assert m.enc_dims == (16, 32)
    t2, m2 = parse_config_text(format_config(t, m))
    assert (t2, m2) == (t, m)


@pytest.mark.parametrize("text", ["bogus = 1", "lr0 = abc", "lr0", "ablation = nope"])
def test_config_parse_errors(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_train_rejects_geometry_mismatch(tiny_data):
    with pytest.raises(ConfigError):
        train(tiny_data, TrainConfig(max_steps=1, eval_every=0), ModelConfig())


def test_frozen_model_constant_loss(tiny_data):
    n_train = len(tiny_data.split("train"))
    cfg = TrainConfig(max_steps=3, batch=n_train, augment=(), eval_every=0,
                      freeze=("conditioner", "encoder", "decoder"))
    r = train(tiny_data, cfg, ModelConfig(**TINY))
    torch.manual_seed(cfg.seed)
    fresh = AffordanceModel(ModelConfig(**TINY))
    for (k, a), b in zip(r.model.state_dict().items(), fresh.state_dict().values()):
        assert torch.equal(a, b), k
    # every step sees the whole split, so only summation order may differ
    tot = [h["total"] for h in r.history]
    assert max(tot) - min(tot) <= 1e-6 * tot[0]


def test_loss_decreases_over_training(tiny_data):
    cfg = TrainConfig(lr0=3e-3, max_steps=60, batch=2, augment=(), eval_every=0, seed=0)
    r = train(tiny_data, cfg, ModelConfig(**TINY))
    tot = [h["total"] for h in r.history]
    assert np.mean(tot[-10:]) < np.mean(tot[:10])
    assert all(math.isfinite(x) for x in tot)


def test_checkpoint_round_trip(tiny_data, tmp_path):
    cfg = TrainConfig(max_steps=3, batch=2, eval_every=0, lr0=1e-3)
    r = train(tiny_data, cfg, ModelConfig(**TINY), out_dir=tmp_path)
    ck = load_checkpoint(tmp_path / "last.afht")
    assert ck.step == 3 and ck.model_config == ModelConfig(**TINY)
    assert set(ck.tensors) == set(r.checkpoint.tensors)
    for k, v in r.checkpoint.tensors.items():
        assert torch.equal(ck.tensors[k], v), k
    assert any(k.startswith("optim.") and k.endswith(".exp_avg") for k in ck.tensors)
    save_checkpoint(ck, tmp_path / "again.afht")
    assert (tmp_path / "again.afht").read_bytes() == (tmp_path / "last.afht").read_bytes()
    raw = (tmp_path / "last.afht").read_bytes()
    assert raw[:4] == b"AFHT" and int.from_bytes(raw[4:8], "little") == 1


def test_bad_checkpoint_magic(tmp_path):
    (tmp_path / "x.afht").write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.afht")


def test_resume_matches_uninterrupted(tiny_data, tmp_path):
    cfg = TrainConfig(max_steps=6, batch=2, eval_every=0, lr0=1e-3, dtype="float64")
    full = train(tiny_data, cfg, ModelConfig(**TINY))
    train(tiny_data, cfg, ModelConfig(**TINY), out_dir=tmp_path, stop_after=3)
    resumed = train(tiny_data, cfg, resume=load_checkpoint(tmp_path / "last.afht"))
    assert [h["step"] for h in resumed.history] == [3, 4, 5]
    for a, b in zip(full.history[3:], resumed.history):
        assert abs(a["total"] - b["total"]) <= 1e-12


def test_step_log_fields(tiny_data, tmp_path):
    cfg = TrainConfig(max_steps=2, batch=2, eval_every=0)
    train(tiny_data, cfg, ModelConfig(**TINY), log_path=tmp_path / "log.jsonl")
    rows = [json.loads(s) for s in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == [0, 1]
    assert set(rows[0]) >= {"step", "bce", "soft_iou_loss", "total", "lr"}


def test_best_checkpoint_written_with_validation(tiny_data, tmp_path):
    cfg = TrainConfig(epochs=2, batch=2, eval_every=1)
    r = train(tiny_data, cfg, ModelConfig(**TINY), out_dir=tmp_path)
    assert len(r.val_reports) == 2
    assert (tmp_path / "best.afht").exists()
    assert "val" in load_checkpoint(tmp_path / "best.afht").extra
