import csv
import os

import numpy as np
import pytest
import torch

from cdcl import evalkit, trainer
from cdcl.decode import DecodeOptions
from cdcl.evalkit import ablation_suite, read_rows
from cdcl.network import ModelConfig, read_checkpoint
from cdcl.objective import LossWeights
from cdcl.synthgen import SceneConfig
from cdcl.trainer import (
    LOG_COLUMNS,
    DataSource,
    Datasets,
    EpochSampler,
    TrainConfig,
    TrainingDiverged,
    configuration_weights,
    mixed_batch,
    run_configuration,
    sweep,
    train,
)


def small_config(**kw):
    ds = Datasets(real=DataSource(scene=SceneConfig(seed=1).to_dict(), count=4),
                  synthetic=DataSource(scene=SceneConfig(seed=2).to_dict(), count=4),
                  eval=DataSource(scene=SceneConfig(seed=3).to_dict(), count=2))
    base = dict(steps=3, batch_size=4, datasets=ds, model=ModelConfig(feature_channels=8, head_channels=8),
                decode=DecodeOptions(scales=(1.0,), skeletons=False))
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        TrainConfig(configuration="BOTH")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=5)
    TrainConfig(configuration="SYN", batch_size=5)
    assert TrainConfig(configuration="NO-SP").configuration == "NO_SP"
    cfg = small_config(weights=LossWeights(gamma=0.25))
    assert TrainConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()
    with pytest.raises(KeyError):
        TrainConfig.from_dict({"weights": {"delta": 1.0}})


def test_configuration_weights():
    w = LossWeights()
    assert configuration_weights("SYN", w).alpha == 0 and configuration_weights("SYN", w).beta == 1
    assert configuration_weights("NO_SP", w).beta == 0 and configuration_weights("NO_SP", w).alpha == 1
    assert configuration_weights("CDCL", w) == w


def test_mixed_batches_are_exactly_half_and_half():
    rng = np.random.default_rng(0)
    real, syn = EpochSampler(7, rng), EpochSampler(3, rng)
    seen = []
    for _ in range(6):
        b = mixed_batch(real, syn, 10)
        assert len(b.real_idx) == 5 and len(b.syn_idx) == 5
        assert b.domains == ["real"] * 5 + ["synthetic"] * 5
        seen += list(b.real_idx)
    # each epoch over the 7 real samples visits every one exactly once
    assert sorted(seen[:7]) == list(range(7))
    with pytest.raises(ValueError):
        mixed_batch(real, syn, 9)


def test_train_writes_log_and_checkpoints(tmp_path):
    cfg = small_config(checkpoint_every=2)
    res = train(cfg, str(tmp_path))
    with open(res.log_path) as f:
        rows = list(csv.reader(f))
    assert tuple(rows[0]) == LOG_COLUMNS and len(rows) == 4
    assert os.path.exists(tmp_path / "step_000002.ckpt") and res.checkpoint.endswith("final.ckpt")
    r = res.rows[-1]
    total = sum(r[k] for k in LOG_COLUMNS if k not in ("step", "total"))
    assert r["total"] == pytest.approx(total, rel=1e-6)
    assert r["part_r"] == 0 and res.real_part_terms == 0


def test_syn_never_touches_real_data(monkeypatch):
    calls = []
    orig = trainer.load_source

    def spy(src, domain):
        calls.append(domain)
        return orig(src, domain)

    monkeypatch.setattr(trainer, "load_source", spy)
    res = train(small_config(configuration="SYN", weights=configuration_weights("SYN", LossWeights())))
    assert calls == ["synthetic"]
    assert all(r["kpts_r"] == 0 and r["paf_r"] == 0 for r in res.rows)


def test_real_part_labels_only_in_cdcl_real():
    cdcl = train(small_config(configuration="CDCL"))
    assert cdcl.real_part_terms == 0
    real = train(small_config(configuration="CDCL_REAL"))
    assert real.real_part_terms == 3 and real.rows[-1]["part_r"] > 0


def test_train_is_reproducible(tmp_path):
    a = train(small_config(), str(tmp_path / "a"))
    b = train(small_config(), str(tmp_path / "b"))
    assert open(a.checkpoint, "rb").read() == open(b.checkpoint, "rb").read()
    assert a.rows == b.rows


def test_divergence_is_reported(monkeypatch, tmp_path):
    orig = trainer.loss_total

    def poisoned(*args, **kw):
        total, terms = orig(*args, **kw)
        return total * float("nan"), terms

    monkeypatch.setattr(trainer, "loss_total", poisoned)
    with pytest.raises(TrainingDiverged, match="step 1"):
        train(small_config(), str(tmp_path))


def test_run_configuration_row():
    _, row = run_configuration("NO-SP", small_config())
    assert row["config_id"] == "NO_SP"
    assert {"head", "torso", "u-arms", "l-arms", "u-legs", "l-legs", "background", "avg"} <= set(row)


def test_sweep_grid(tmp_path):
    rows = sweep([1.0], [0.0, 0.5], small_config(steps=2), str(tmp_path))
    assert [(r["beta"], r["gamma"]) for r in rows] == [(1.0, 0.0), (1.0, 0.5)]
    assert len(read_rows(str(tmp_path / "sweep.csv"))) == 2
    with pytest.raises(ValueError):
        sweep([], [0.5], small_config())


def test_ablation_suite_outputs(tmp_path):
    cfg = small_config(steps=1)
    report = ablation_suite(cfg, str(tmp_path), axes=["configuration", "appearance"], repeats=2)
    assert [r["setting"] for r in report["configuration"]] == ["SYN", "SYN", "NO_SP", "NO_SP", "CDCL", "CDCL"]
    assert {r["setting"] for r in report["appearance"]} == {"original", "no_background", "grayscale", "binary_mask"}
    for axis in ("configuration", "appearance"):
        assert len(read_rows(str(tmp_path / f"ablation_{axis}.csv"))) == len(report[axis])
        assert (tmp_path / f"ablation_{axis}.png").stat().st_size > 0
    with pytest.raises(ValueError):
        ablation_suite(cfg, None, axes=["lighting"])


def test_ablation_persists_partial_results(tmp_path, monkeypatch):
    orig = trainer.run_configuration
    calls = []

    def flaky(name, cfg, out_dir=None):
        calls.append(cfg)
        if len(calls) == 3:
            raise RuntimeError("interrupted")
        return orig(name, cfg, out_dir)

    monkeypatch.setattr(trainer, "run_configuration", flaky)
    with pytest.raises(RuntimeError):
        ablation_suite(small_config(steps=1), str(tmp_path), axes=["models"], repeats=1)
    assert len(read_rows(str(tmp_path / "ablation_models.csv"))) == 2
    assert [c.datasets.synthetic.scene["model_pool_size"] for c in calls] == [1, 5, 10]


def test_repeats_move_training_seeds_but_not_evaluation():
    cfg = small_config()
    c = evalkit._repeat_config(cfg, 2, {"appearance": "grayscale"})
    assert c.seed == cfg.seed + 2
    assert c.datasets.synthetic.scene["seed"] == cfg.datasets.synthetic.scene["seed"] + 2
    assert c.datasets.synthetic.scene["appearance"] == "grayscale"
    assert c.datasets.eval == cfg.datasets.eval
