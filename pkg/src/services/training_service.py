"""
Training runs, evaluation, repeated runs and GNPP placement sweeps.
"""

import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ..core.exceptions import ConfigError
from ..core.timing import timed
from ..schemas.gnpp import NeighborhoodType
from ..schemas.run import DatasetName, NormalizeScheme, Precision, RunConfig, RunResult, RunSummary
from .arch_service import build_network, resolve_arch, seed_streams, strip_gnpp, with_gnpp
from .checkpoint_service import checkpoint_load, checkpoint_save
from .data_service import Dataset, Split, augment_flip, load_dataset, normalize
from .file_service import (
    CURVE_COLUMNS,
    append_csv_row,
    reset_csv,
    run_dir,
    write_config_echo,
    write_seed,
    write_table,
)
from .network_service import Network
from .optim_service import SgdState, schedule_lr, sgd_step
from .tensor_service import dtype_for

logger = logging.getLogger(__name__)


class Splits(NamedTuple):
    train: Dataset
    test: Dataset


def load_splits(cfg: RunConfig, data_dir: Path) -> Splits:
    """Load, normalize and truncate both splits of the configured dataset."""
    train = load_dataset(cfg.dataset, data_dir, Split.TRAIN).subset(cfg.limit_train)
    test = load_dataset(cfg.dataset, data_dir, Split.TEST).subset(cfg.limit_test)
    train = normalize(train, cfg.normalize)
    test = normalize(test, cfg.normalize, train_mean=train.channel_mean)
    return Splits(train, test)


def evaluate(net: Network, ds: Dataset, batch_size: int = 500) -> float:
    """Fraction of misclassified samples."""
    if len(ds) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    predictions = net.predict(ds.images, batch_size=batch_size)
    return float(np.mean(predictions != ds.labels))


def train_epoch(
    net: Network,
    train: Dataset,
    state: SgdState,
    batch_size: int,
    rng: np.random.Generator,
    flip_prob: float = 0.0,
) -> Tuple[float, int]:
    """One pass over a shuffled training set. Returns (mean batch loss, batches run)."""
    order = rng.permutation(len(train))
    losses = []
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        x = train.images[idx]
        if flip_prob > 0:
            x = augment_flip(x, flip_prob, rng)
        loss, _ = net.loss_and_grads(x, train.labels[idx], training=True)
        sgd_step(net.params(), net.grads(), state)
        losses.append(loss)
    return float(np.mean(losses)), len(losses)


def train_once(cfg: RunConfig, seed: int, splits: Splits) -> RunResult:
    """Train one network from `seed`, writing curves.csv, checkpoint.bin, config.json and seed.txt."""
    arch = resolve_arch(cfg.arch)
    schedule = cfg.effective_schedule()
    out = run_dir(cfg.out_dir, seed)
    write_config_echo(
        out / "config.json",
        {**cfg.model_dump(mode="json"), "seed": seed, "effective_schedule": schedule.render()},
    )
    write_seed(out / "seed.txt", seed)
    curves = reset_csv(out / "curves.csv", CURVE_COLUMNS)

    net = build_network(
        arch,
        (1,) + splits.train.images.shape[1:],
        seed=seed,
        dtype=dtype_for(Precision.SINGLE),
        strict_placement=cfg.strict_placement,
    )
    data_rng = seed_streams(seed)[2]
    state = SgdState(lr=schedule_lr(schedule, 0), momentum=cfg.momentum, weight_decay=cfg.weight_decay)

    iteration = 0
    test_error = 1.0
    for epoch in range(schedule.total_epochs):
        state.lr = schedule_lr(schedule, epoch)
        with timed(f"Epoch {epoch + 1}/{schedule.total_epochs} (seed {seed})", logger):
            train_loss, batches = train_epoch(net, splits.train, state, cfg.batch_size, data_rng, cfg.flip_prob)
            iteration += batches
            test_error = evaluate(net, splits.test)
        net.epoch = epoch + 1
        append_csv_row(
            curves,
            {
                "epoch": epoch + 1,
                "iteration": iteration,
                "lr": state.lr,
                "train_loss": train_loss,
                "test_error": test_error,
            },
            CURVE_COLUMNS,
        )
        logger.info(f"epoch {epoch + 1}: lr={state.lr:g} loss={train_loss:.4f} test_error={test_error:.4f}")

    checkpoint_save(net, out / "checkpoint.bin")
    return RunResult(seed=seed, test_error=test_error, epochs=schedule.total_epochs, run_dir=out)


def train_run(cfg: RunConfig, data_dir: Optional[Path] = None, splits: Optional[Splits] = None) -> RunSummary:
    """Train `cfg.repeats` networks from seeds seed..seed+repeats-1."""
    if splits is None:
        data_dir = data_dir or cfg.data_dir
        if data_dir is None:
            raise ConfigError("no data directory configured")
        splits = load_splits(cfg, data_dir)
    results = [train_once(cfg, cfg.seed + r, splits) for r in range(cfg.repeats)]
    summary = RunSummary(results=results)
    if cfg.repeats > 1:
        table = pd.DataFrame({"seed": [r.seed for r in results], "test_error": summary.errors})
        write_table(Path(cfg.out_dir) / "summary.csv", table)
    return summary


def evaluate_checkpoint(
    checkpoint: Path,
    dataset: DatasetName,
    data_dir: Path,
    scheme: NormalizeScheme = NormalizeScheme.SCALE255,
    limit_test: Optional[int] = None,
) -> float:
    """Test error of a saved network.

    Mean subtraction needs the training mean, so the training split is loaded for it.
    """
    net = checkpoint_load(checkpoint)
    dataset = DatasetName(dataset)
    if net.arch.num_classes != dataset.class_count:
        raise ConfigError(
            f"checkpoint classifies {net.arch.num_classes} classes, {dataset.value} has {dataset.class_count}"
        )
    test = load_dataset(dataset, data_dir, Split.TEST).subset(limit_test)
    train_mean = None
    if NormalizeScheme(scheme) is NormalizeScheme.MEAN_SUBTRACT:
        train_mean = normalize(load_dataset(dataset, data_dir, Split.TRAIN), scheme).channel_mean
    test = normalize(test, scheme, train_mean=train_mean)
    return evaluate(net, test)


# ---------------------------------------------------------------------------
# Placement sweeps
# ---------------------------------------------------------------------------

BASELINE = "-"


class SweepJob(NamedTuple):
    pools: Tuple[int, ...]
    nb_type: Optional[NeighborhoodType]
    sigma: Optional[float]
    cfg: RunConfig


def pool_label(pools: Sequence[int]) -> str:
    """1-based pool names, e.g. (0, 2) -> "L1+L3"."""
    return "+".join(f"L{p + 1}" for p in pools) if pools else BASELINE


def column_label(nb_type: NeighborhoodType, sigma: float) -> str:
    return f"{NeighborhoodType(nb_type).token}({sigma:g})"


def sweep_jobs(
    cfg: RunConfig,
    nb_types: Sequence[NeighborhoodType],
    sigmas: Sequence[float],
    pool_subsets: Optional[Sequence[Sequence[int]]] = None,
) -> List[SweepJob]:
    """Baseline first, then every non-empty pool subset x type x sigma."""
    if not nb_types or not sigmas:
        raise ConfigError("sweep needs at least one neighborhood type and one sigma")
    arch = strip_gnpp(resolve_arch(cfg.arch))
    pool_count = len(arch.pool_indices())
    if pool_count == 0:
        raise ConfigError("architecture has no pooling layers to place GNPP in front of")
    if pool_subsets is None:
        pool_subsets = [
            combo for size in range(1, pool_count + 1) for combo in itertools.combinations(range(pool_count), size)
        ]
    subsets = [tuple(sorted(set(s))) for s in pool_subsets if s]
    if not subsets:
        raise ConfigError("empty sweep: no pool subsets selected")

    root = Path(cfg.out_dir)
    baseline = cfg.model_copy(update={"arch": arch.source_text, "out_dir": root / "baseline"})
    jobs = [SweepJob((), None, None, baseline)]
    for pools in subsets:
        for nb_type in nb_types:
            for sigma in sigmas:
                variant = with_gnpp(arch, pools, nb_type, sigma)
                name = f"{pool_label(pools)}_{NeighborhoodType(nb_type).value}_s{sigma:g}"
                jobs.append(
                    SweepJob(
                        pools,
                        NeighborhoodType(nb_type),
                        sigma,
                        cfg.model_copy(update={"arch": variant.source_text, "out_dir": root / name}),
                    )
                )
    return jobs


def _run_job(job: SweepJob, data_dir: Path, splits: Optional[Splits] = None) -> float:
    return train_run(job.cfg, data_dir=data_dir, splits=splits).mean


def sweep(
    cfg: RunConfig,
    nb_types: Sequence[NeighborhoodType],
    sigmas: Sequence[float],
    data_dir: Path,
    pool_subsets: Optional[Sequence[Sequence[int]]] = None,
    workers: int = 1,
) -> pd.DataFrame:
    """Train every placement combination and return one row per combination.

    Columns: pools, nb_type, sigma, test_error, relative_decrease (vs the shared baseline).
    """
    jobs = sweep_jobs(cfg, nb_types, sigmas, pool_subsets)
    logger.info(f"Sweeping {len(jobs)} configurations with {workers} worker(s)")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_job, job, data_dir) for job in jobs]
            errors = [f.result() for f in futures]
    else:
        splits = load_splits(cfg, data_dir)
        errors = [_run_job(job, data_dir, splits) for job in jobs]

    baseline = errors[0]
    rows = []
    for job, error in zip(jobs, errors):
        rows.append(
            {
                "pools": pool_label(job.pools),
                "nb_type": job.nb_type.value if job.nb_type else BASELINE,
                "sigma": job.sigma if job.sigma is not None else np.nan,
                "test_error": error,
                "relative_decrease": (baseline - error) / baseline if baseline > 0 else 0.0,
            }
        )
    return pd.DataFrame(rows)


def sweep_table(results: pd.DataFrame, nb_types: Sequence[NeighborhoodType], sigmas: Sequence[float]) -> pd.DataFrame:
    """Wide layout: one row per pool subset, one column per (type, sigma).

    The baseline row repeats the baseline error in every column.
    """
    columns = [column_label(t, s) for t in nb_types for s in sigmas]
    baseline = float(results.loc[results["pools"] == BASELINE, "test_error"].iloc[0])
    table = {BASELINE: {c: baseline for c in columns}}
    for row in results[results["pools"] != BASELINE].itertuples():
        table.setdefault(row.pools, {})[column_label(row.nb_type, row.sigma)] = row.test_error
    wide = pd.DataFrame.from_dict(table, orient="index", columns=columns)
    wide.index.name = "pools"
    return wide.reset_index()
