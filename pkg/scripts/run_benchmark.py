#!/usr/bin/env python3
"""
run_benchmark.py — Directional comparison of CMI-guided and baseline samplers.

Usage::

    # Inpainting and deblurring, 100 paired seeds each
    uv run python scripts/run_benchmark.py

    # Quicker run
    uv run python scripts/run_benchmark.py --batch 20 --workers 2

For every configuration the script runs all samplers on the same seeded
problems, prints the per-sampler table and, for each CMI sampler, the paired
MSE difference to its base sampler with its effect size.  The cmi_dps vs dps
comparison passes when its mean paired difference is not positive and sets
the exit code; the other pairs (e.g. cmi_pigdm vs pigdm) are reported for
information only.
"""

from __future__ import annotations

import dataclasses
import json
import sys
import time
from pathlib import Path

from cmi_dps.experiment.config import load_config
from cmi_dps.experiment.runner import run_experiment

ROOT = Path(__file__).resolve().parent.parent
CONFIGS = (
    ROOT / "config" / "gmm_inpainting.yml",
    ROOT / "config" / "gmm_deblur.yml",
)
# (base, treatment) pairs that decide the exit code
GATED_PAIRS = frozenset({("dps", "cmi_dps")})


def is_gated(base: str, treatment: str) -> bool:
    return (base, treatment) in GATED_PAIRS


def failed_comparisons(results: dict[str, object]) -> list[str]:
    """Gated comparisons whose mean paired MSE difference is positive."""
    return [
        f"{name}: mse({pair['treatment']}) - mse({pair['base']})"
        for name, entry in results.items()
        for pair in entry["paired_differences"]  # type: ignore[index]
        if is_gated(pair["base"], pair["treatment"]) and pair["mean"] > 0.0
    ]


def run_benchmarks(
    configs: tuple[Path, ...], batch: int | None, workers: int | None, out: Path
) -> dict[str, object]:
    results: dict[str, object] = {}
    for path in configs:
        config = load_config(path)
        overrides = {
            key: value
            for key, value in {"batch": batch, "workers": workers}.items()
            if value is not None
        }
        if overrides:
            config = dataclasses.replace(config, **overrides)

        print(f"== {path.name}: {config.batch} seeds, operator={config.operator.kind}")
        start = time.perf_counter()
        summary = run_experiment(config, out / path.stem)
        elapsed = time.perf_counter() - start
        print(summary.summary_table())
        for pair in summary.paired_differences:
            if not is_gated(pair.base, pair.treatment):
                status = "INFO"
            elif pair.favours_treatment:
                status = "PASS"
            else:
                status = "FAIL"
            print(
                f"  [{status}] mse({pair.treatment}) <= mse({pair.base}): "
                f"effect size {pair.effect_size:+.3f}"
            )
        print(f"  {elapsed:.1f}s\n")
        results[path.stem] = {**summary.as_dict(), "seconds": elapsed}
    return results


if __name__ == "__main__":
    import argparse

    parser = argparse.ArgumentParser(
        description="Run the directional CMI vs baseline benchmark",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__,
    )
    parser.add_argument("--batch", type=int, default=None)
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument(
        "--config",
        type=Path,
        action="append",
        help="Benchmark configuration; repeat to run several (default: all)",
    )
    parser.add_argument("--out", type=Path, default=ROOT / "results" / "benchmark")
    parser.add_argument(
        "--output",
        type=Path,
        default=ROOT / "benchmark_results.json",
        help="JSON file for the aggregated results",
    )
    args = parser.parse_args()

    configs = tuple(args.config) if args.config else CONFIGS
    results = run_benchmarks(configs, args.batch, args.workers, args.out)
    args.output.write_text(json.dumps(results, indent=2, default=str) + "\n")
    print(f"Results saved to {args.output}")

    failed = failed_comparisons(results)
    for line in failed:
        print(f"[FAIL] {line}")
    sys.exit(1 if failed else 0)
