"""Seeded batch runner: draw problems, run every sampler, score and write results.

For seed ``s_i = base_seed + i`` the ground truth ``x0`` and the measurement
noise come from a problem stream that depends only on ``s_i``, so every
sampler of that seed solves the same problem from the same ``x_N``.

Outputs under the output directory:

- ``results.csv`` with header ``seed,mode,mse,psnr,ssim,wall_ms,cmi_steps_nonzero``,
  one row per (seed, sampler label), sorted by seed then label;
- ``summary.json`` with per-sampler mean and standard error of every metric and
  the paired MSE differences between each CMI sampler and its base sampler;
- ``records/<seed>_<label>.json``, one :class:`RunRecord` per run;
- ``grids/*.txt`` plain-text images when ``dump_grids`` is set.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np

from cmi_dps.diffusion.operators import measure
from cmi_dps.diffusion.oracles import metrics
from cmi_dps.diffusion.samplers import sample
from cmi_dps.exceptions import CmiDpsError
from cmi_dps.experiment.config import (
    build_model,
    build_noise,
    build_noise_schedule,
    build_operator,
    build_prior,
    validate_config,
)

if TYPE_CHECKING:
    from cmi_dps.diffusion.samplers import RunRecord
    from cmi_dps.experiment.config import ExperimentConfig

logger = logging.getLogger(__name__)

CSV_HEADER = ("seed", "mode", "mse", "psnr", "ssim", "wall_ms", "cmi_steps_nonzero")
METRIC_NAMES = ("mse", "psnr", "ssim")

_PROBLEM_STREAM = 2


# ---------------------------------------------------------------------------
# Result types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ResultRow:
    """Scores of one (seed, sampler) run.

    A failed run carries NaN metrics and the name of the error type that
    stopped it; ``error`` is not written to ``results.csv``.
    """

    seed: int
    mode: str
    mse: float
    psnr: float
    ssim: float
    wall_ms: float
    cmi_steps_nonzero: int
    failed: bool = False
    error: str | None = None

    def csv_fields(self) -> list[str]:
        return [
            str(self.seed),
            self.mode,
            _fmt(self.mse),
            _fmt(self.psnr),
            _fmt(self.ssim),
            _fmt(self.wall_ms),
            str(self.cmi_steps_nonzero),
        ]


@dataclass
class SeedResult:
    """Everything produced for one seed."""

    seed: int
    x_true: np.ndarray
    rows: list[ResultRow] = field(default_factory=list)
    records: list[RunRecord] = field(default_factory=list)
    failures: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class ModeSummary:
    """Mean and standard error of each metric for one sampler."""

    label: str
    n_runs: int
    n_failed: int
    means: dict[str, float]
    stderrs: dict[str, float]


@dataclass(frozen=True)
class PairedDifference:
    """Paired MSE difference ``treatment - base`` over the seeds both finished.

    Attributes:
        base: Label of the base sampler.
        treatment: Label of the CMI sampler.
        n_pairs: Number of seeds where both runs succeeded.
        mean: Mean paired difference; negative favours the treatment.
        stderr: Standard error of the mean difference.
        effect_size: ``mean / std`` of the paired differences.
    """

    base: str
    treatment: str
    n_pairs: int
    mean: float
    stderr: float
    effect_size: float

    @property
    def favours_treatment(self) -> bool:
        return self.mean <= 0.0


@dataclass
class ExperimentSummary:
    """Aggregated outcome of :func:`run_experiment`.

    Attributes:
        rows: All result rows in output order.
        modes: One :class:`ModeSummary` per sampler label.
        paired_differences: One entry per (base, CMI) sampler pair.
        output_dir: Directory the files were written to, if any.
    """

    rows: list[ResultRow]
    modes: list[ModeSummary]
    paired_differences: list[PairedDifference]
    output_dir: Path | None = None

    @property
    def n_failed(self) -> int:
        return sum(1 for row in self.rows if row.failed)

    def mode(self, label: str) -> ModeSummary:
        for summary in self.modes:
            if summary.label == label:
                return summary
        msg = f"no sampler labelled {label!r}"
        raise KeyError(msg)

    def summary_table(self) -> str:
        """Return a human-readable table of per-sampler means."""
        width = max((len(s.label) for s in self.modes), default=4)
        lines = [
            f"{'mode':<{width}}  {'runs':>4}  {'mse':>22}  {'psnr':>20}  {'ssim':>20}"
        ]
        for s in self.modes:
            cells = [
                f"{s.means[name]:.4g} ± {s.stderrs[name]:.2g}" for name in METRIC_NAMES
            ]
            lines.append(
                f"{s.label:<{width}}  {s.n_runs:>4}  {cells[0]:>22}  "
                f"{cells[1]:>20}  {cells[2]:>20}"
            )
        for pair in self.paired_differences:
            lines.append(
                f"mse({pair.treatment}) - mse({pair.base}) = "
                f"{pair.mean:.4g} ± {pair.stderr:.2g} "
                f"(effect size {pair.effect_size:+.3f}, {pair.n_pairs} pairs)"
            )
        if self.n_failed:
            lines.append(f"{self.n_failed} run(s) failed")
        return "\n".join(lines)

    def as_dict(self) -> dict[str, Any]:
        return {
            "modes": [dataclasses.asdict(s) for s in self.modes],
            "paired_differences": [
                dataclasses.asdict(pair) for pair in self.paired_differences
            ],
            "n_failed": self.n_failed,
            "failures": [
                {"seed": row.seed, "mode": row.mode, "error": row.error}
                for row in self.rows
                if row.failed
            ],
        }


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------


def problem_stream(seed: int) -> np.random.Generator:
    """Stream for the ground truth and measurement noise of one seed."""
    return np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=(_PROBLEM_STREAM,))
    )


def run_seed(config: ExperimentConfig, seed: int) -> SeedResult:
    """Solve the problem of one seed with every configured sampler."""
    prior = build_prior(config.prior)
    schedule = build_noise_schedule(config.schedule)
    model = build_model(prior, schedule)
    A = build_operator(config)
    noise = build_noise(config, A)

    rng = problem_stream(seed)
    x_true = prior.sample(rng, 1)[0]
    y = measure(A, noise, x_true, rng)

    result = SeedResult(seed=seed, x_true=x_true)
    for sampler in config.samplers:
        guidance = dataclasses.replace(sampler, seed=seed)
        try:
            record = sample(
                y, A, noise, model, schedule, guidance, dense_limit=config.dense_limit
            )
        except CmiDpsError as exc:
            reason = f"{type(exc).__name__}: {exc}"
            logger.warning(
                "Seed %d, sampler %s failed: %s", seed, guidance.name, reason
            )
            result.failures[guidance.name] = reason
            result.rows.append(
                ResultRow(
                    seed=seed,
                    mode=guidance.name,
                    mse=math.nan,
                    psnr=math.nan,
                    ssim=math.nan,
                    wall_ms=math.nan,
                    cmi_steps_nonzero=0,
                    failed=True,
                    error=type(exc).__name__,
                )
            )
            continue
        scores = metrics(record.x0, x_true, config.image_dims)
        result.records.append(record)
        result.rows.append(
            ResultRow(
                seed=seed,
                mode=guidance.name,
                mse=scores["mse"],
                psnr=scores["psnr"],
                ssim=scores.get("ssim", math.nan),
                wall_ms=record.wall_ms,
                cmi_steps_nonzero=record.cmi_steps_nonzero,
            )
        )
    logger.info("Seed %d finished (%d sampler(s))", seed, len(config.samplers))
    return result


def run_experiment(
    config: ExperimentConfig, output_dir: Path | None = None
) -> ExperimentSummary:
    """Run every sampler on ``config.batch`` seeded problems.

    Args:
        config: Validated experiment configuration.
        output_dir: Where to write results; defaults to ``config.output_dir``.

    Returns:
        The :class:`ExperimentSummary`.

    Raises:
        ConfigurationError: If the configuration is inconsistent.
    """
    validate_config(config)
    out = Path(output_dir if output_dir is not None else config.output_dir)
    seeds = [config.base_seed + i for i in range(config.batch)]

    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(run_seed, [config] * len(seeds), seeds))
    else:
        results = [run_seed(config, seed) for seed in seeds]

    rows = sorted(
        (row for result in results for row in result.rows),
        key=lambda row: (row.seed, row.mode),
    )
    summary = ExperimentSummary(
        rows=rows,
        modes=summarise_modes(rows, [s.name for s in config.samplers]),
        paired_differences=paired_differences(rows, config),
        output_dir=out,
    )
    write_outputs(out, config, results, summary)
    return summary


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


def _mean_stderr(values: list[float]) -> tuple[float, float]:
    if not values:
        return math.nan, math.nan
    array = np.asarray(values, dtype=np.float64)
    mean = float(np.mean(array))
    if array.size < 2:
        return mean, math.nan
    return mean, float(np.std(array, ddof=1) / math.sqrt(array.size))


def summarise_modes(rows: list[ResultRow], labels: list[str]) -> list[ModeSummary]:
    summaries = []
    for label in labels:
        mine = [row for row in rows if row.mode == label]
        ok = [row for row in mine if not row.failed]
        means: dict[str, float] = {}
        stderrs: dict[str, float] = {}
        for name in METRIC_NAMES:
            means[name], stderrs[name] = _mean_stderr([getattr(r, name) for r in ok])
        summaries.append(
            ModeSummary(
                label=label,
                n_runs=len(mine),
                n_failed=len(mine) - len(ok),
                means=means,
                stderrs=stderrs,
            )
        )
    return summaries


def paired_differences(
    rows: list[ResultRow], config: ExperimentConfig
) -> list[PairedDifference]:
    """Pair each ``cmi_<x>`` sampler with the first ``<x>`` sampler."""
    by_seed = {(row.seed, row.mode): row.mse for row in rows if not row.failed}
    seeds = sorted({row.seed for row in rows})
    pairs = []
    for treatment in config.samplers:
        if not treatment.uses_cmi:
            continue
        base_mode = treatment.mode.removeprefix("cmi_")
        base = next((s for s in config.samplers if s.mode == base_mode), None)
        if base is None:
            continue
        diffs = [
            by_seed[(seed, treatment.name)] - by_seed[(seed, base.name)]
            for seed in seeds
            if (seed, treatment.name) in by_seed and (seed, base.name) in by_seed
        ]
        mean, stderr = _mean_stderr(diffs)
        spread = float(np.std(diffs, ddof=1)) if len(diffs) > 1 else math.nan
        effect = mean / spread if spread and math.isfinite(spread) else math.nan
        pairs.append(
            PairedDifference(
                base=base.name,
                treatment=treatment.name,
                n_pairs=len(diffs),
                mean=mean,
                stderr=stderr,
                effect_size=effect,
            )
        )
    return pairs


# ---------------------------------------------------------------------------
# Writers
# ---------------------------------------------------------------------------


def _fmt(value: float) -> str:
    return format(value, ".17g")


def _jsonable(value: Any) -> Any:
    """Replace non-finite floats by their string names, recursively."""
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    if isinstance(value, dict):
        return {key: _jsonable(item) for key, item in value.items()}
    if isinstance(value, list | tuple):
        return [_jsonable(item) for item in value]
    return value


def _write_json(path: Path, data: object) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        json.dump(_jsonable(data), fh, indent=2)
        fh.write("\n")


def write_csv(path: Path, rows: list[ResultRow]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        writer.writerows(row.csv_fields() for row in rows)


def write_outputs(
    out: Path,
    config: ExperimentConfig,
    results: list[SeedResult],
    summary: ExperimentSummary,
) -> None:
    write_csv(out / "results.csv", summary.rows)
    _write_json(
        out / "summary.json", {**summary.as_dict(), "config": config.as_dict()}
    )
    for result in results:
        for record in result.records:
            _write_json(
                out / "records" / f"{result.seed}_{record.label}.json",
                record.to_dict(),
            )
        if config.dump_grids and config.image_dims is not None:
            height, width = config.image_dims
            grids = out / "grids"
            grids.mkdir(parents=True, exist_ok=True)
            np.savetxt(
                grids / f"{result.seed}_truth.txt",
                result.x_true.reshape(height, width),
                fmt="%.6f",
            )
            for record in result.records:
                np.savetxt(
                    grids / f"{result.seed}_{record.label}.txt",
                    record.x0.reshape(height, width),
                    fmt="%.6f",
                )
    logger.info("Wrote %d rows to %s", len(summary.rows), out / "results.csv")
