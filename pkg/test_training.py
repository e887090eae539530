"""
Training runs, repeats, sweeps and the network-level gradient check.
"""

import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

from src.core.exceptions import ConfigError, VerificationError
from src.schemas.gnpp import NeighborhoodType
from src.schemas.run import DatasetName, NormalizeScheme, RunConfig, RunResult, RunSummary
from src.services.arch_service import parse_arch, resolve_arch
from src.services.checkpoint_service import checkpoint_load
from src.services.file_service import CURVE_COLUMNS, append_csv_row, read_curves, reset_csv
from src.services.gradcheck_service import assert_passed, network_gradcheck
from src.services.layer_service import ReLU
from src.services.optim_service import parse_schedule
from src.services.training_service import (
    BASELINE,
    evaluate_checkpoint,
    load_splits,
    sweep,
    sweep_jobs,
    sweep_table,
    train_run,
)

T1, T2 = NeighborhoodType.TYPE1, NeighborhoodType.TYPE2


def tiny_config(out_dir, data_dir, **overrides) -> RunConfig:
    values = dict(
        arch="lenet2",
        dataset=DatasetName.MNIST,
        data_dir=data_dir,
        schedule=parse_schedule("2@1e-3,1@1e-4"),
        batch_size=20,
        out_dir=out_dir,
    )
    values.update(overrides)
    return RunConfig(**values)


def test_single_run_writes_artifacts(tmp_path, mnist_dir):
    cfg = tiny_config(tmp_path / "runs", mnist_dir)
    summary = train_run(cfg)
    assert len(summary.results) == 1
    result = summary.results[0]
    run = tmp_path / "runs" / "seed-0"
    assert result.run_dir == run
    for name in ("curves.csv", "checkpoint.bin", "config.json", "seed.txt"):
        assert (run / name).exists(), name
    assert (run / "seed.txt").read_text().strip() == "0"
    assert '"effective_schedule": "2@0.001,1@0.0001"' in (run / "config.json").read_text()

    curves = read_curves(run / "curves.csv")
    assert list(curves.columns) == CURVE_COLUMNS
    assert curves["epoch"].tolist() == [1, 2, 3]
    assert curves["iteration"].tolist() == [3, 6, 9]
    assert curves["lr"].tolist() == pytest.approx([1e-3, 1e-3, 1e-4])
    assert curves["test_error"].iloc[-1] == pytest.approx(result.test_error, abs=1e-6)
    assert not (tmp_path / "runs" / "summary.csv").exists()

    net = checkpoint_load(run / "checkpoint.bin")
    assert net.epoch == 3
    assert evaluate_checkpoint(run / "checkpoint.bin", DatasetName.MNIST, mnist_dir) == result.test_error


def test_runs_are_reproducible_from_seed(tmp_path, mnist_dir):
    first = train_run(tiny_config(tmp_path / "a", mnist_dir, schedule=parse_schedule("1@1e-3"))).results[0]
    second = train_run(tiny_config(tmp_path / "b", mnist_dir, schedule=parse_schedule("1@1e-3"))).results[0]
    for name in ("curves.csv", "checkpoint.bin"):
        assert (first.run_dir / name).read_bytes() == (second.run_dir / name).read_bytes()


def test_repeats_write_summary(tmp_path, mnist_dir):
    cfg = tiny_config(tmp_path / "runs", mnist_dir, schedule=parse_schedule("1@1e-3"), repeats=2, seed=5)
    summary = train_run(cfg)
    assert [r.seed for r in summary.results] == [5, 6]
    table = pd.read_csv(tmp_path / "runs" / "summary.csv")
    assert table["seed"].tolist() == [5, 6]
    assert table["test_error"].tolist() == pytest.approx(summary.errors, abs=1e-6)


def test_summary_statistics(tmp_path):
    results = [RunResult(seed=s, test_error=e, epochs=1, run_dir=tmp_path) for s, e in enumerate([0.1, 0.3])]
    summary = RunSummary(results=results)
    assert summary.mean == pytest.approx(0.2)
    assert summary.std == pytest.approx(np.sqrt(0.02))
    assert RunSummary(results=results[:1]).std == 0.0


def test_effective_schedule_scaling_and_cap(tmp_path):
    base = dict(arch="lenet2", schedule=parse_schedule("20@1e-3,4@1e-4,1@1e-5"), out_dir=tmp_path)
    scaled = RunConfig(**base, epoch_scale=0.5).effective_schedule()
    assert [s.epochs for s in scaled.stages] == [10, 2, 1]
    capped = RunConfig(**base, epoch_scale=0.5, max_epochs=11).effective_schedule()
    assert capped.render() == "10@0.001,1@0.0001"


def test_classifier_width_must_match_dataset(tmp_path):
    with pytest.raises(ValidationError, match="class count"):
        RunConfig(arch="lenet3", dataset=DatasetName.CIFAR100, schedule=parse_schedule("1@1e-3"))


def test_mean_subtract_shares_the_training_mean(tmp_path, mnist_dir):
    cfg = tiny_config(tmp_path, mnist_dir, normalize=NormalizeScheme.MEAN_SUBTRACT, limit_train=30, limit_test=10)
    splits = load_splits(cfg, mnist_dir)
    assert len(splits.train) == 30 and len(splits.test) == 10
    assert splits.test.channel_mean == splits.train.channel_mean


def test_missing_data_dir_is_a_config_error(tmp_path):
    cfg = tiny_config(tmp_path, None)
    with pytest.raises(ConfigError, match="data directory"):
        train_run(cfg)


def test_curves_keep_small_learning_rates(tmp_path):
    path = reset_csv(tmp_path / "curves.csv", CURVE_COLUMNS)
    row = {"epoch": 1, "iteration": 600, "lr": 1e-7, "train_loss": 0.25, "test_error": 0.0123}
    append_csv_row(path, row, CURVE_COLUMNS)
    curves = read_curves(path)
    assert curves["lr"].iloc[0] == pytest.approx(1e-7)
    assert curves["test_error"].iloc[0] == pytest.approx(0.0123)


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

def test_sweep_jobs_cover_every_pool_subset(tmp_path):
    cfg = tiny_config(tmp_path / "sweep", None)
    jobs = sweep_jobs(cfg, [T1], [1.0])
    assert [job.pools for job in jobs] == [(), (0,), (1,), (0, 1)]
    assert jobs[0].nb_type is None
    assert "G1" not in jobs[0].cfg.arch
    assert resolve_arch(jobs[3].cfg.arch).layers == resolve_arch(
        "{C5(S1P0)@20-G1(1.0)-MP2(S2)}{C5(S1P0)@50-G1(1.0)-MP2(S2)}{FC500}{FC10}"
    ).layers
    assert jobs[1].cfg.out_dir == tmp_path / "sweep" / "L1_type1_s1"
    assert jobs[0].cfg.out_dir == tmp_path / "sweep" / "baseline"


def test_sweep_jobs_strip_existing_gnpp_for_the_baseline(tmp_path):
    cfg = tiny_config(
        tmp_path, None, arch="{C5(S1P0)@20-G2(0.5)-MP2(S2)}{C5(S1P0)@50-MP2(S2)}{FC500}{FC10}"
    )
    jobs = sweep_jobs(cfg, [T1, T2], [1.0, 0.5], pool_subsets=[[1]])
    assert len(jobs) == 5
    assert resolve_arch(jobs[0].cfg.arch).layers == resolve_arch("lenet2").layers


def test_sweep_jobs_reject_empty_sweeps(tmp_path):
    cfg = tiny_config(tmp_path, None)
    with pytest.raises(ConfigError):
        sweep_jobs(cfg, [], [1.0])
    with pytest.raises(ConfigError):
        sweep_jobs(cfg, [T1], [1.0], pool_subsets=[[]])


def test_sweep_table_layout():
    rows = [{"pools": BASELINE, "nb_type": BASELINE, "sigma": np.nan, "test_error": 0.2}]
    for i, pools in enumerate(["L1", "L2", "L1+L2"]):
        for nb_type in (T1, T2):
            for sigma in (1.0, 0.8, 0.5):
                rows.append({"pools": pools, "nb_type": nb_type.value, "sigma": sigma, "test_error": 0.1 + 0.01 * i})
    wide = sweep_table(pd.DataFrame(rows), [T1, T2], [1.0, 0.8, 0.5])
    assert wide.shape == (4, 7)
    assert list(wide.columns) == ["pools", "G1(1)", "G1(0.8)", "G1(0.5)", "G2(1)", "G2(0.8)", "G2(0.5)"]
    assert wide["pools"].tolist() == [BASELINE, "L1", "L2", "L1+L2"]
    assert (wide.iloc[0, 1:] == 0.2).all()
    np.testing.assert_allclose(wide.iloc[3, 1:].astype(float), 0.12)


def test_sweep_end_to_end(tmp_path, mnist_dir):
    cfg = tiny_config(tmp_path / "sweep", mnist_dir, schedule=parse_schedule("1@1e-3"))
    results = sweep(cfg, [T1], [1.0], mnist_dir, pool_subsets=[[0]])
    assert results["pools"].tolist() == [BASELINE, "L1"]
    assert results["relative_decrease"].iloc[0] == 0.0
    assert (tmp_path / "sweep" / "baseline" / "seed-0" / "curves.csv").exists()
    assert (tmp_path / "sweep" / "L1_type1_s1" / "seed-0" / "checkpoint.bin").exists()


# ---------------------------------------------------------------------------
# Network gradient check
# ---------------------------------------------------------------------------

@pytest.mark.parametrize(
    "arch",
    [
        "lenet2",
        "{C5(S1P0)@20-G1(0.8)-MP2(S2)}{C5(S1P0)@50-G2(1.0)-MP2(S2)}{FC500}{FC10}",
        "{C3(S1P1)@4-GB(0.7)-AP2(S2)}{FC16-D0.5}{FC10}",
    ],
)
def test_network_gradcheck_passes(arch):
    report = network_gradcheck(resolve_arch(arch), (2, 1, 16, 16), seed=0)
    assert report["layer"].iloc[-1] == "input"
    assert (report["checked"] > 0).all()
    assert report["passed"].all(), report
    assert_passed(report)


def test_corrupted_backward_fails_gradcheck(monkeypatch):
    original = ReLU.backward
    monkeypatch.setattr(ReLU, "backward", lambda self, grad: 1.5 * original(self, grad))
    report = network_gradcheck(parse_arch("{C5(S1P0)@20-MP2(S2)}{C5(S1P0)@50-MP2(S2)}{FC500}{FC10}"))
    assert not report["passed"].all()
    # the classifier sits after the last ReLU and is unaffected
    assert report.set_index("layer").loc["fc2", "passed"]
    with pytest.raises(VerificationError, match="fc1"):
        assert_passed(report)
