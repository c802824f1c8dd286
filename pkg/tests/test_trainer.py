import json
import math

import numpy as np
import pytest
import torch

from finealign.trainer import (PRESETS, ConfigMismatch, EvalConfig, TrainConfig, Trainer,
                               TrainingAborted, build_bundle, evaluate, lr_at, make_optimizer,
                               rng_streams, run_stage)


def small_config(**kw):
    base = dict(batch_size=4, epochs=2, warmup_steps=1, learning_rate=1e-3, crops_per_image=2,
                regions_per_batch=6)
    return TrainConfig(**{**base, **kw})


def test_lr_schedule():
    c = TrainConfig(learning_rate=1.0, warmup_steps=10)
    assert lr_at(0, c, 110) == 0.0
    assert lr_at(5, c, 110) == pytest.approx(0.5)
    assert lr_at(10, c, 110) == pytest.approx(1.0)
    assert lr_at(60, c, 110) == pytest.approx(0.5)
    assert lr_at(110, c, 110) == 0.0
    vals = [lr_at(s, c, 110) for s in range(10, 111)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        lr_at(0, c, 5)


def test_presets():
    p1 = TrainConfig.from_preset("paper-s1")
    assert (p1.learning_rate, p1.weight_decay, p1.warmup_steps, p1.batch_size, p1.epochs) == (1e-6, 1.0, 1000, 40, 1)
    p2 = TrainConfig.from_preset("paper-s2", stage="s2")
    assert (p2.learning_rate, p2.weight_decay, p2.warmup_steps, p2.batch_size, p2.epochs) == (4e-9, 1.0, 250, 40, 10)
    assert TrainConfig.from_preset("paper-s1", learning_rate=2e-6).learning_rate == 2e-6
    with pytest.raises(KeyError):
        TrainConfig.from_preset("nope")
    assert set(PRESETS) >= {"toy", "paper-s1", "paper-s2"}


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(stage="s3")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(region_source="elsewhere")
    a, b = TrainConfig(), TrainConfig()
    assert a.hash() == b.hash() and a.hash() != TrainConfig(seed=1).hash()


def test_rng_streams_independent():
    s = rng_streams(0)
    assert list(s) == ["init", "data", "crop", "eval"]
    draws = {k: g.integers(1 << 30) for k, g in s.items()}
    assert len(set(draws.values())) == 4
    assert rng_streams(0)["crop"].integers(1 << 30) == draws["crop"]


def test_optimizer_groups(tiny_vision, tiny_text):
    b = build_bundle(small_config(), tiny_vision, tiny_text)
    opt = make_optimizer(b, small_config(weight_decay=0.5))
    decay, no_decay = opt.param_groups
    assert decay["weight_decay"] == 0.5 and no_decay["weight_decay"] == 0.0
    assert any(p is b.logit_scale for p in no_decay["params"])
    assert all(p.ndim >= 2 for p in decay["params"])


def test_stage_steps_change_weights(tiny_vision, tiny_text, tiny_data):
    recs, _ = tiny_data
    for stage in ("s1", "s2"):
        cfg = small_config(stage=stage)
        tr = Trainer(build_bundle(cfg, tiny_vision, tiny_text), cfg, recs)
        before = tr.bundle.student.proj.weight.clone()
        rep = tr.step()
        assert math.isfinite(rep.total) and rep.step == 0 and len(rep.batch_ids) == 4
        expected = {"s1": {"glo", "dis"}, "s2": {"glo", "loc"}}[stage]
        assert set(rep.components) == expected
        tr.step()
        assert not torch.equal(before, tr.bundle.student.proj.weight)


def test_frozen_teacher_constant(tiny_vision, tiny_text, tiny_data):
    recs, _ = tiny_data
    cfg = small_config(strategy="frozen")
    tr = Trainer(build_bundle(cfg, tiny_vision, tiny_text), cfg, recs)
    t0 = [p.clone() for p in tr.bundle.teacher.parameters()]
    for _ in range(4):
        tr.step()
    assert all(torch.equal(a, b) for a, b in zip(t0, tr.bundle.teacher.parameters()))


def test_epoch_permutation_covers_data(tiny_vision, tiny_text, tiny_data):
    recs, _ = tiny_data
    cfg = small_config()
    tr = Trainer(build_bundle(cfg, tiny_vision, tiny_text), cfg, recs)
    seen = tr.next_indices() + tr.next_indices()
    assert sorted(seen) == list(range(8))
    tr.next_indices()
    assert tr.state.epoch == 1


def test_nonfinite_loss_aborts(tiny_vision, tiny_text, tiny_data):
    recs, _ = tiny_data
    cfg = small_config()
    tr = Trainer(build_bundle(cfg, tiny_vision, tiny_text), cfg, recs)
    with torch.no_grad():
        tr.bundle.student.proj.weight.fill_(float("nan"))
    with pytest.raises((TrainingAborted, ValueError)):
        tr.step()


def test_dataset_too_small(tiny_vision, tiny_text, tiny_data):
    recs, _ = tiny_data
    cfg = small_config(batch_size=16)
    with pytest.raises(ValueError):
        Trainer(build_bundle(cfg, tiny_vision, tiny_text), cfg, recs)
    cfg = small_config(warmup_steps=50)
    with pytest.raises(ValueError, match="warmup"):
        Trainer(build_bundle(cfg, tiny_vision, tiny_text), cfg, recs)


def test_resume_matches_uninterrupted(tmp_path, tiny_vision, tiny_text, tiny_data):
    recs, _ = tiny_data
    cfg = small_config(stage="s1", epochs=2)
    full = run_stage(cfg, recs, tmp_path / "full", vision=tiny_vision, text=tiny_text)
    part = run_stage(cfg, recs, tmp_path / "part", vision=tiny_vision, text=tiny_text, stop_after=2)
    assert part.trainer.state.step == 2
    resumed = run_stage(cfg, recs, tmp_path / "part", vision=tiny_vision, text=tiny_text,
                        resume_from=tmp_path / "part" / "snapshot_last.pt")
    for a, b in zip(full.trainer.bundle.state_dict().values(), resumed.trainer.bundle.state_dict().values()):
        assert torch.equal(a, b)
    assert full.trainer.state.history == resumed.trainer.state.history
    with pytest.raises(ConfigMismatch):
        run_stage(small_config(stage="s1", epochs=2, learning_rate=5e-3), recs, tmp_path / "x",
                  vision=tiny_vision, text=tiny_text, resume_from=tmp_path / "part" / "snapshot_last.pt")


def test_run_stage_outputs_and_init_from(tmp_path, tiny_vision, tiny_text, tiny_data):
    recs, masks = tiny_data
    classes = ["forest", "water", "farmland", "building"]
    ev = EvalConfig(n_cap=None, n_pairs=50)
    s1 = run_stage(small_config(stage="s1", epochs=1), recs, tmp_path / "s1", vision=tiny_vision,
                   text=tiny_text, eval_records=recs, eval_masks=masks, classes=classes, eval_config=ev)
    lines = [json.loads(l) for l in s1.metrics_log.read_text().splitlines()]
    assert [l["event"] for l in lines] == ["init", "epoch_1"]
    assert len((tmp_path / "s1" / "train_log.jsonl").read_text().splitlines()) == 2
    s2 = run_stage(small_config(stage="s2", epochs=1, strategy="ema"), recs, tmp_path / "s2",
                   init_from=s1.checkpoint)
    assert s2.trainer.bundle.strategy == "ema"
    # the stage-2 model starts from the stage-1 weights
    first = run_stage(small_config(stage="s2", epochs=1, learning_rate=0.0), recs, tmp_path / "s2b",
                      init_from=s1.checkpoint)
    for a, b in zip(s1.trainer.bundle.student.parameters(), first.trainer.bundle.student.parameters()):
        assert torch.equal(a, b)


def test_evaluate_report(tiny_vision, tiny_text, tiny_data):
    recs, masks = tiny_data
    bundle = build_bundle(small_config(), tiny_vision, tiny_text)
    classes = ["forest", "water", "farmland", "building"]
    rep = evaluate(bundle, recs, masks, classes, EvalConfig(n_cap=4, n_pairs=50), seed=0)
    assert rep.dbi is not None and rep.map_coherence is not None and rep.miou is not None
    assert rep.zsc_top1 is not None and not rep.recall_at  # fewer than 10 records
    again = evaluate(bundle, recs, masks, classes, EvalConfig(n_cap=4, n_pairs=50), seed=0)
    assert rep.to_json() == again.to_json()
    only = evaluate(bundle, recs, masks, classes, EvalConfig(), seed=0, metrics=("map",))
    assert only.dbi is None and only.map_coherence is not None


def test_region_source_shard(tiny_vision, tiny_text, tiny_data):
    recs, _ = tiny_data
    cfg = small_config(stage="s2", region_source="shard", region_mode="roi_embedding")
    tr = Trainer(build_bundle(cfg, tiny_vision, tiny_text), cfg, recs)
    assert math.isfinite(tr.step().total)


@pytest.mark.parametrize("mode", ["cls_of_crop", "pooled_patches_of_crop", "roi_embedding"])
def test_region_modes_train(mode, tiny_vision, tiny_text, tiny_data):
    recs, _ = tiny_data
    cfg = small_config(stage="s2", region_mode=mode)
    tr = Trainer(build_bundle(cfg, tiny_vision, tiny_text), cfg, recs)
    assert np.isfinite(tr.step().components["loc"])
