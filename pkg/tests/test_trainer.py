import csv
import io

import numpy as np
import pytest

from epic import trainer as tr
from epic.config import ExperimentConfig
from epic.model import MODES
from epic.trainer import (TrainingDiverged, ablate, analytic_trainable_count, build_experiment,
                          build_ledger, count_params, evaluate_checkpoint, layer_interval,
                          run_many, sweep, train)

SMALL = dict(n_train=32, n_val=16, n_test=16, epochs=2)


def _values(rows, split, metric):
    return [float(r[-1]) for r in rows if r[6] == split and r[7] == metric]


def test_baseline_has_nothing_to_update():
    res = train(ExperimentConfig(mode="baseline", **SMALL), save=False)
    assert res.ledger.trainable_param_count == 0
    acc = _values(res.rows, "val", "accuracy")
    assert len(acc) == SMALL["epochs"] + 1 and len(set(acc)) == 1


@pytest.mark.parametrize("mode", MODES)
def test_frozen_checksum_unchanged(mode):
    res = train(ExperimentConfig(mode=mode, **SMALL), save=False)
    assert res.checksum_before == res.checksum_after


def test_only_trainable_leaves_move(backbone):
    cfg = ExperimentConfig(**SMALL)
    before = {n: t.data.copy() for n, t in backbone.named_parameters()}
    exp = build_experiment(cfg, backbone)
    start = {n: t.data.copy() for n, t in exp.model.named_trainable()}
    res = train(cfg, backbone=backbone, save=False)
    for name, t in backbone.named_parameters():
        assert np.array_equal(before[name], t.data)
    assert res.checksum_before == res.checksum_after == backbone.checksum()
    assert start  # the trainable side exists and is rebuilt per run


@pytest.mark.parametrize("overrides", [
    dict(),
    dict(mode="linear"),
    dict(mode="ptuning"),
    dict(mode="baseline", tau_trainable=True),
    dict(prompt_len=5, tau_trainable=True),
    dict(d_vision=32, d_text=16, n_heads=4),
    dict(interaction_layers=(1,)),
])
def test_runtime_count_matches_closed_form(overrides, backbone):
    cfg = ExperimentConfig(n_train=4, n_val=4, n_test=4, **overrides)
    bb = None if "d_text" in overrides else backbone
    exp = build_experiment(cfg, bb, with_features=False)
    assert exp.model.n_trainable() == analytic_trainable_count(cfg)
    assert count_params(cfg).frozen_param_count == exp.backbone.n_params()


def test_hand_counted_modes():
    assert analytic_trainable_count(ExperimentConfig(mode="ptuning")) == 96 + 1056
    assert analytic_trainable_count(ExperimentConfig(mode="linear")) == 96 + 1056 + 64 * 64 + 64
    assert analytic_trainable_count(ExperimentConfig(mode="baseline")) == 0


@pytest.mark.parametrize("mode", ["ptuning", "linear", "epic"])
def test_saved_activations_below_full_finetune(mode, backbone):
    exp = build_experiment(ExperimentConfig(mode=mode, n_train=16, n_val=4, n_test=4), backbone)
    ledger = build_ledger(exp)
    assert 0 < ledger.activation_floats_saved_for_backward < ledger.full_finetune_activation_floats
    assert all(not p.requires_grad for p in backbone.parameters())


def test_identical_runs_give_identical_csv(tmp_path):
    cfg = ExperimentConfig(**SMALL)
    a = train(cfg, out_dir=tmp_path / "a")
    b = train(cfg, out_dir=tmp_path / "b")
    text_a = (a.run_dir / "metrics.csv").read_bytes()
    assert text_a == (b.run_dir / "metrics.csv").read_bytes()
    header = next(csv.reader(io.StringIO(text_a.decode())))
    assert tuple(header) == tr.METRIC_HEADER
    for name in ("config.txt", "checkpoint.npz", "ledger.txt"):
        assert (a.run_dir / name).is_file()


def test_checkpoint_evaluation_reproduces_final_metrics(tmp_path):
    cfg = ExperimentConfig(**SMALL)
    res = train(cfg, out_dir=tmp_path)
    loaded = ExperimentConfig.load(res.run_dir / "config.txt")
    rows = evaluate_checkpoint(loaded, res.run_dir / "checkpoint.npz")
    got = {f"{split}_{metric}": float(v) for split, metric, v in rows}
    assert got == pytest.approx(res.final, abs=0)


def test_divergence_names_first_bad_op(monkeypatch):
    original = tr.Adam.step

    def poisoned(self):
        original(self)
        self.params[0].data[0, 0] = np.nan  # prompt_t0

    monkeypatch.setattr(tr.Adam, "step", poisoned)
    with pytest.raises(TrainingDiverged, match="first non-finite op: matmul"):
        train(ExperimentConfig(**SMALL), save=False)


def test_zeroed_prompt_gradients_learn_nothing():
    cfg = ExperimentConfig(mode="ptuning", **SMALL)
    frozen = train(cfg, zero_prompt_grads=True, save=False)
    base = train(cfg.replace(mode="baseline"), save=False)
    for res in (frozen, base):
        acc = _values(res.rows, "test", "accuracy")
        assert acc[-1] - acc[0] == 0.0
    learned = train(cfg, save=False)
    assert _values(learned.rows, "train", "loss")[-1] < _values(frozen.rows, "train", "loss")[-1]


def test_epic_fits_noise_free_task():
    res = train(ExperimentConfig(noise=0.0), save=False)
    assert max(_values(res.rows, "val", "accuracy")) >= 0.95


def test_multilabel_and_entailment_runs():
    multi = train(ExperimentConfig(task="multi", **SMALL), save=False)
    assert {"val_f1_micro", "val_f1_macro", "test_f1_micro"} <= set(multi.final)
    ent = train(ExperimentConfig(task="entailment3", **SMALL), save=False)
    assert "test_accuracy" in ent.final


def test_results_independent_of_worker_count():
    cfgs = [ExperimentConfig(seed=s, n_train=16, n_val=8, n_test=8, epochs=1) for s in (0, 1, 2)]
    serial = run_many(cfgs, workers=1)
    parallel = run_many(cfgs, workers=2)
    for a, b in zip(serial, parallel):
        assert a.metrics_csv() == b.metrics_csv()


def test_ablation_table(tmp_path):
    cfg = ExperimentConfig(n_train=16, n_val=8, n_test=8, epochs=1)
    table = ablate(cfg, MODES, seeds=[0, 1, 2], out_dir=tmp_path)
    assert list(table.scores) == list(MODES)
    assert len(table.markdown().strip().splitlines()) == 2 + len(MODES)
    rows = list(csv.DictReader(open(tmp_path / "ablation.csv")))
    assert [r["mode"] for r in rows] == list(MODES)
    assert int(rows[-1]["trainable_params"]) == analytic_trainable_count(cfg)
    assert (tmp_path / "ablation_runs.csv").is_file() and (tmp_path / "ablation.md").is_file()
    with pytest.raises(ValueError, match="3 seeds"):
        ablate(cfg, MODES, seeds=[0, 1])


def test_sweep_grid_arithmetic(tmp_path):
    cfg = ExperimentConfig(n_train=16, n_val=8, n_test=8, epochs=1)
    rows = sweep(cfg, [(3, 4, 5)], ["cos"], seeds=[0, 1], out_dir=tmp_path)
    assert len(rows) == 1 and rows[0][:3] == ("3-4-5", 1, "cos")
    small = sweep(cfg, [(4,)], ["cos", "mmd"], seeds=[0])
    assert [r[1] for r in small] == [0, 0]
    header = (tmp_path / "sweep.csv").read_text().splitlines()[0]
    assert header == ",".join(tr.SWEEP_HEADER)


def test_layer_intervals():
    assert layer_interval([1, 3, 5]) == 2
    assert layer_interval([2, 3, 4]) == 1
    assert layer_interval([4]) == 0
    with pytest.raises(ValueError, match="evenly"):
        layer_interval([0, 1, 3])
    with pytest.raises(ValueError, match="empty"):
        sweep(ExperimentConfig(), [], ["cos"])
    with pytest.raises(ValueError, match="interval"):
        sweep(ExperimentConfig(), [(0, 3)], ["cos"])


def test_pooled_std():
    assert tr.pooled_std([1.0, 3.0], [2.0, 2.0]) == pytest.approx(1.0)
