import csv
import json

import numpy as np
import pytest

from lnsr.cli import main
from lnsr.encoder import EncoderConfig, load_snapshot
from lnsr.harness.config import ConfigError, PretrainSettings
from lnsr.harness.pretrain import pretrain_surrogate
from lnsr.harness.sweep import (
    DirectionalResult,
    SweepSummary,
    directional_verdict,
    format_comparison,
    gap_report,
    load_sweep,
    seed_sweep,
    subsample_study,
    write_subsample_csv,
)
from lnsr.harness.train import RunRecord
from lnsr.encoder import init_params


def _record(seed, train, eval_, probe=0.1):
    return RunRecord(seed, "h", {}, "accuracy", [], {"train_metric": train, "eval_metric": eval_},
                     {"per_layer_ratio": [0.05, probe]}, 1, 0, {})


# -- pure aggregation ----------------------------------------------------------

def test_gap_zero_when_equal():
    s = SweepSummary("x", "h", "accuracy", [_record(0, 0.8, 0.8), _record(1, 0.6, 0.6)])
    assert gap_report(s).mean_gap == 0.0


def test_gap_value():
    s = SweepSummary("x", "h", "accuracy", [_record(0, 0.95, 0.70), _record(1, 0.9, 0.9)])
    rep = gap_report(s)
    assert rep.per_seed[0]["gap"] == pytest.approx(0.25, abs=1e-15)


def test_mean_gap_is_difference_of_means():
    rng = np.random.default_rng(0)
    recs = [_record(i, *rng.random(2)) for i in range(7)]
    s = SweepSummary("x", "h", "accuracy", recs)
    assert abs(gap_report(s).mean_gap - (s.train_scores.mean() - s.eval_scores.mean())) < 1e-12


def test_summary_uses_population_std():
    s = SweepSummary("x", "h", "accuracy", [_record(0, 1, 0.5), _record(1, 1, 0.7)])
    assert s.std == pytest.approx(0.1)
    assert s.mean == pytest.approx(0.6) and s.max == 0.7


def _dir(ft, ln, seed=7):
    mk = lambda label, vals: SweepSummary(label, "h", "accuracy",  # noqa: E731
                                          [_record(i, t, e, p) for i, (t, e, p) in enumerate(vals)])
    return DirectionalResult(seed, mk("FT", ft), mk("LNSR", ln))


def test_directional_checks_and_verdict():
    good = _dir([(1.0, 0.6, 0.2), (1.0, 0.8, 0.2)], [(0.9, 0.7, 0.1), (0.9, 0.75, 0.1)])
    assert good.checks == {"std": True, "mean": True, "gap": True}
    assert good.probe_lower
    bad = _dir([(1.0, 0.7, 0.1), (1.0, 0.7, 0.1)], [(1.0, 0.5, 0.1), (1.0, 0.9, 0.1)])
    assert not bad.passed
    assert directional_verdict([good])
    assert not directional_verdict([bad])
    assert directional_verdict([bad, good, good, bad])
    assert not directional_verdict([bad, good, bad, bad])
    text = format_comparison([good.ft, good.lnsr])
    assert "FT" in text and "LNSR" in text


# -- sweeps on the small config ----------------------------------------------------

def test_identical_seeds_give_identical_records(small_cfg):
    s = seed_sweep(small_cfg(), [3, 3])
    assert s.records[0].comparable() == s.records[1].comparable()
    assert s.std == 0.0


def test_sweep_requires_two_seeds(small_cfg):
    with pytest.raises(ConfigError):
        seed_sweep(small_cfg(), [0])


def test_sweep_persistence_round_trip(small_cfg, tmp_path):
    cfg = small_cfg(regularizer__kind="lnsr")
    s = seed_sweep(cfg, [0, 1], out_dir=tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert "config.yaml" in names and "summary.csv" in names and "gap.csv" in names
    assert f"run-{cfg.config_hash()}-seed0.json" in names
    loaded = load_sweep(tmp_path)
    assert abs(loaded.mean - s.mean) < 1e-12 and abs(loaded.std - s.std) < 1e-12 and loaded.max == s.max
    with open(tmp_path / "summary.csv") as fh:
        row = next(csv.DictReader(fh))
    assert abs(float(row["mean"]) - np.mean([r.eval_metric for r in loaded.records])) < 1e-12


def test_sweep_rerun_is_bit_identical(small_cfg):
    a = seed_sweep(small_cfg(), [0, 1])
    b = seed_sweep(small_cfg(), [0, 1])
    assert [r.comparable() for r in a.records] == [r.comparable() for r in b.records]


def test_sweep_flags_aborted_runs(small_cfg):
    s = seed_sweep(small_cfg(regularizer__kind="lnsr", regularizer__sigma=1e200), [0, 1])
    assert s.incomplete and set(s.failures) == {0, 1} and not s.records


def test_subsample_study(small_cfg, tmp_path):
    cfg = small_cfg(data__train_size=64, batch_size=8)
    studies = subsample_study(cfg, ratios=(0.5, 1.0), seeds=[0, 1])
    assert studies[0.5].records[0].final["n_train"] == 32
    assert studies[0.5].records[0].final["n_eval"] == studies[1.0].records[0].final["n_eval"]
    plain = seed_sweep(cfg, [0, 1])
    assert [r.final for r in studies[1.0].records] == [r.final for r in plain.records]
    path = tmp_path / "sub.csv"
    write_subsample_csv({"none": studies}, path)
    rows = list(csv.DictReader(open(path)))
    assert [r["ratio"] for r in rows] == ["0.5", "1.0"]


def test_subsample_smaller_than_batch_rejected(small_cfg):
    with pytest.raises(ConfigError):
        subsample_study(small_cfg(), ratios=(0.15,), seeds=[0, 1])


# -- surrogate pre-training ----------------------------------------------------------

ENC = EncoderConfig(num_layers=2, d_model=16, n_heads=2, d_ff=32, vocab_size=32, max_seq_len=16)


def test_zero_step_cap_returns_initialization():
    res = pretrain_surrogate(ENC, PretrainSettings(max_steps=0, corpus_size=64))
    init = init_params(ENC, np.random.default_rng(1234))
    for n in res.params.body_names:
        assert np.array_equal(res.params[n], init[n])
    assert res.quality == "plateau"


def test_pretraining_is_deterministic():
    s = PretrainSettings(max_steps=3, corpus_size=64)
    assert pretrain_surrogate(ENC, s).params.equals(pretrain_surrogate(ENC, s).params)


def test_pretraining_beats_chance():
    res = pretrain_surrogate(ENC, PretrainSettings(max_steps=150, corpus_size=400, learning_rate=2e-3))
    assert res.heldout_accuracy > res.chance
    assert res.losses[-1] < res.losses[0]


# -- CLI -------------------------------------------------------------------------------

SMALL_FLAGS = ["--set", "encoder.num_layers=2", "--set", "encoder.d_model=16", "--set", "encoder.d_ff=32",
               "--train-size", "48", "--eval-size", "40", "--set", "data.seq_len=10", "--batch-size", "16",
               "--epochs", "1", "--no-pretrain", "--set", "probe.draws=2", "--set", "probe.max_examples=4"]


def test_cli_train_writes_record(tmp_path):
    out = tmp_path / "run.json"
    assert main(["train", *SMALL_FLAGS, "--regularizer", "lnsr", "--sigma", "0.05", "--out", str(out)]) == 0
    rec = json.loads(out.read_text())
    assert rec["config"]["regularizer"]["sigma"] == 0.05 and rec["config"]["pretrain"]["enabled"] is False


def test_cli_validation_error_exit_code(capsys):
    assert main(["train", "--set", "regularizer.sigma=-1"]) == 1
    assert "error" in capsys.readouterr().err


def test_cli_numerical_abort_exit_code():
    assert main(["train", *SMALL_FLAGS, "--regularizer", "lnsr", "--sigma", "1e200"]) == 2


def test_cli_sweep_and_report(tmp_path, capsys):
    assert main(["sweep", *SMALL_FLAGS, "--seeds", "0-1", "--compare", "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / "comparison.csv").exists()
    capsys.readouterr()
    assert main(["report", str(tmp_path / "ft"), str(tmp_path / "lnsr"), "--out", str(tmp_path / "t.csv")]) == 0
    table = capsys.readouterr().out
    assert "none" in table and "lnsr" in table
    assert (tmp_path / "t.csv").exists()


def test_cli_probe_csv(tmp_path):
    out = tmp_path / "probe.csv"
    assert main(["probe", *SMALL_FLAGS, "--layer", "0", "--max-examples", "3", "--out", str(out)]) == 0
    assert out.read_text().startswith("# scale: 0.05")


def test_cli_verify_theory(tmp_path):
    out = tmp_path / "theory.json"
    assert main(["verify-theory", "--function", "tanh", "--sigmas", "0.01,0.1", "--samples", "2000",
                 "--out", str(out)]) == 0
    data = json.loads(out.read_text())
    assert len(data["reports"]) == 2 and "slope" in data


def test_cli_pretrain_snapshot(tmp_path):
    out = tmp_path / "body.bin"
    assert main(["pretrain", *SMALL_FLAGS, "--set", "pretrain.max_steps=2", "--set", "pretrain.corpus_size=64",
                 "--out", str(out)]) == 0
    params, meta = load_snapshot(out)
    assert meta["steps"] == 2 and params.config.d_model == 16


def test_cli_subsample(tmp_path):
    out = tmp_path / "sub.csv"
    flags = [f for f in SMALL_FLAGS]
    flags[flags.index("--train-size") + 1] = "80"
    assert main(["subsample", *flags, "--ratios", "0.5", "--seeds", "0-1", "--methods", "none", "--batch-size", "8",
                 "--out", str(out)]) == 0
    assert "0.5" in out.read_text()
