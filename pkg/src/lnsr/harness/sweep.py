"""Seed sweeps, generalization gaps, subsample studies and FT-vs-LNSR comparisons."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import ConfigError, TrainConfig, dump_config
from .train import NumericalAbort, RunRecord, build_task, initial_body, resolve_encoder, train

log = logging.getLogger(__name__)


@dataclass
class SweepSummary:
    """Aggregate of per-seed runs sharing one config. ``std`` is the population std."""

    label: str
    config_hash: str
    metric: str
    records: list[RunRecord]
    failures: dict[int, str] = field(default_factory=dict)

    @property
    def incomplete(self) -> bool:
        return bool(self.failures)

    @property
    def seeds(self) -> list[int]:
        return [r.seed for r in self.records]

    def _vals(self, key: str) -> np.ndarray:
        return np.array([r.final[key] for r in self.records], dtype=np.float64)

    @property
    def eval_scores(self) -> np.ndarray:
        return self._vals("eval_metric")

    @property
    def train_scores(self) -> np.ndarray:
        return self._vals("train_metric")

    @property
    def mean(self) -> float:
        return float(np.mean(self.eval_scores)) if self.records else math.nan

    @property
    def std(self) -> float:
        return float(np.std(self.eval_scores)) if self.records else math.nan

    @property
    def max(self) -> float:
        return float(np.max(self.eval_scores)) if self.records else math.nan

    @property
    def final_probe_ratio(self) -> float:
        """Mean over seeds of the last-layer probe ratio (nan if probing was off)."""
        vals = [r.probe["per_layer_ratio"][-1] for r in self.records if r.probe]
        return float(np.mean(vals)) if vals else math.nan

    def row(self) -> dict:
        gap = gap_report(self)
        return {
            "label": self.label,
            "config_hash": self.config_hash,
            "metric": self.metric,
            "n_seeds": len(self.records),
            "mean": self.mean,
            "std": self.std,
            "max": self.max,
            "train_mean": float(np.mean(self.train_scores)) if self.records else math.nan,
            "mean_gap": gap.mean_gap,
            "final_probe_ratio": self.final_probe_ratio,
            "incomplete": self.incomplete,
        }


@dataclass
class GapReport:
    per_seed: list[dict]
    mean_gap: float


def gap_report(summary: SweepSummary) -> GapReport:
    rows = [
        {"seed": r.seed, "train_metric": r.train_metric, "eval_metric": r.eval_metric,
         "gap": r.train_metric - r.eval_metric}
        for r in summary.records
    ]
    mean_gap = float(np.mean([x["gap"] for x in rows])) if rows else math.nan
    return GapReport(rows, mean_gap)


def _run_one(args):
    cfg, task, body = args
    try:
        return train(cfg, task=task, body=body), None
    except NumericalAbort as exc:
        return None, str(exc)


def seed_sweep(cfg: TrainConfig, seeds: Sequence[int], workers: int = 1, label: str | None = None,
               out_dir: str | Path | None = None) -> SweepSummary:
    """Train ``cfg`` once per seed. Runs share the dataset and the pre-trained body.

    Aborted runs are listed in ``failures`` and the summary is flagged incomplete.
    """
    seeds = [int(s) for s in seeds]
    if len(seeds) < 2:
        raise ConfigError("a sweep needs at least two seeds")
    cfg.validate()
    task = build_task(cfg)
    body = initial_body(cfg, resolve_encoder(cfg, task))
    jobs = [(cfg.with_seed(s), task, body) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]

    records, failures = [], {}
    for seed, (rec, err) in zip(seeds, results):
        if rec is None:
            log.warning("seed %d aborted: %s", seed, err)
            failures[seed] = err
        else:
            records.append(rec)
    summary = SweepSummary(label or cfg.regularizer.kind, cfg.config_hash(), task.eval.metric, records, failures)
    if out_dir is not None:
        save_sweep(summary, cfg, out_dir)
    return summary


# -- persistence -------------------------------------------------------------

def save_sweep(summary: SweepSummary, cfg: TrainConfig, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    for rec in summary.records:
        (out / f"run-{summary.config_hash}-seed{rec.seed}.json").write_text(rec.to_json())
    with open(out / "summary.csv", "w", newline="") as fh:
        row = summary.row()
        w = csv.DictWriter(fh, fieldnames=list(row))
        w.writeheader()
        w.writerow(row)
    with open(out / "gap.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["seed", "train_metric", "eval_metric", "gap"])
        w.writeheader()
        w.writerows(gap_report(summary).per_seed)
    if summary.failures:
        (out / "failures.json").write_text(json.dumps(summary.failures, indent=2))
    return out


def load_sweep(out_dir: str | Path, label: str | None = None) -> SweepSummary:
    out = Path(out_dir)
    records = [RunRecord.from_dict(json.loads(p.read_text())) for p in sorted(out.glob("run-*.json"))]
    if not records:
        raise FileNotFoundError(f"no run records in {out}")
    failures = {}
    if (out / "failures.json").exists():
        failures = {int(k): v for k, v in json.loads((out / "failures.json").read_text()).items()}
    first = records[0]
    return SweepSummary(label or first.config["regularizer"]["kind"], first.config_hash, first.metric,
                        records, failures)


# -- subsampling -------------------------------------------------------------

DEFAULT_RATIOS = (0.15, 0.3, 0.5)


def subsample_study(cfg: TrainConfig, ratios: Iterable[float] = DEFAULT_RATIOS, seeds: Sequence[int] = (0, 1),
                    workers: int = 1) -> dict[float, SweepSummary]:
    out = {}
    for ratio in ratios:
        if not 0 < ratio <= 1:
            raise ConfigError(f"subsample ratio must lie in (0, 1], got {ratio}")
        sub = cfg.with_seed(cfg.seed)
        sub.data.subsample_ratio = float(ratio)
        try:
            out[float(ratio)] = seed_sweep(sub, seeds, workers, label=f"{cfg.regularizer.kind}@{ratio:g}")
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return out


def write_subsample_csv(studies: dict[str, dict[float, SweepSummary]], path: str | Path) -> None:
    """One row per (method, ratio): mean/std/max of the eval metric."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "ratio", "n_train", "mean", "std", "max"])
        for method, per_ratio in studies.items():
            for ratio, s in sorted(per_ratio.items()):
                n_train = s.records[0].final["n_train"] if s.records else ""
                w.writerow([method, ratio, n_train, s.mean, s.std, s.max])


# -- comparisons -------------------------------------------------------------

COMPARISON_FIELDS = ["label", "metric", "n_seeds", "mean", "std", "max", "train_mean", "mean_gap",
                     "final_probe_ratio", "incomplete", "config_hash"]


def comparison_rows(summaries: Sequence[SweepSummary]) -> list[dict]:
    return [{k: s.row()[k] for k in COMPARISON_FIELDS} for s in summaries]


def write_comparison_csv(summaries: Sequence[SweepSummary], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COMPARISON_FIELDS)
        w.writeheader()
        w.writerows(comparison_rows(summaries))


def format_comparison(summaries: Sequence[SweepSummary]) -> str:
    head = f"{'method':<10} {'seeds':>5} {'mean':>8} {'std':>8} {'max':>8} {'gap':>8} {'probe':>9}"
    lines = [head, "-" * len(head)]
    for s in summaries:
        r = s.row()
        flag = " *" if r["incomplete"] else ""
        lines.append(f"{r['label']:<10} {r['n_seeds']:>5} {r['mean']:>8.4f} {r['std']:>8.4f} {r['max']:>8.4f} "
                     f"{r['mean_gap']:>8.4f} {r['final_probe_ratio']:>9.5f}{flag}")
    return "\n".join(lines)


@dataclass
class DirectionalResult:
    """Outcome of one FT-vs-LNSR comparison on one dataset."""

    data_seed: int
    ft: SweepSummary
    lnsr: SweepSummary

    @property
    def checks(self) -> dict[str, bool]:
        return {
            "std": self.lnsr.std <= self.ft.std,
            "mean": self.lnsr.mean >= self.ft.mean,
            "gap": gap_report(self.lnsr).mean_gap <= gap_report(self.ft).mean_gap,
        }

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    @property
    def probe_lower(self) -> bool:
        return self.lnsr.final_probe_ratio < self.ft.final_probe_ratio


def compare_ft_lnsr(cfg: TrainConfig, seeds: Sequence[int], workers: int = 1,
                    out_dir: str | Path | None = None) -> DirectionalResult:
    """Same config and seeds with the regularizer off and with LNSR on."""
    ft_cfg = cfg.with_seed(cfg.seed)
    ft_cfg.regularizer.kind = "none"
    ln_cfg = cfg.with_seed(cfg.seed)
    ln_cfg.regularizer.kind = "lnsr"
    base = Path(out_dir) if out_dir is not None else None
    ft = seed_sweep(ft_cfg, seeds, workers, label="FT", out_dir=base / "ft" if base else None)
    ln = seed_sweep(ln_cfg, seeds, workers, label="LNSR", out_dir=base / "lnsr" if base else None)
    if base is not None:
        write_comparison_csv([ft, ln], base / "comparison.csv")
    return DirectionalResult(cfg.data.seed, ft, ln)


def directional_study(cfg: TrainConfig, seeds: Sequence[int], data_seeds: Sequence[int] = (),
                      workers: int = 1, out_dir: str | Path | None = None) -> list[DirectionalResult]:
    """FT vs LNSR on ``cfg.data.seed``; if any check fails, repeat on ``data_seeds``.

    The study passes when the first comparison passes outright, or when a
    majority of the repeated comparisons pass.
    """
    base = Path(out_dir) if out_dir is not None else None
    first = compare_ft_lnsr(cfg, seeds, workers, base / f"data{cfg.data.seed}" if base else None)
    results = [first]
    if not first.passed:
        for ds in data_seeds:
            alt = cfg.with_seed(cfg.seed)
            alt.data.seed = int(ds)
            results.append(compare_ft_lnsr(alt, seeds, workers, base / f"data{ds}" if base else None))
    return results


def directional_verdict(results: Sequence[DirectionalResult]) -> bool:
    if results[0].passed:
        return True
    rest = results[1:]
    return bool(rest) and 2 * sum(r.passed for r in rest) > len(rest)


__all__ = [
    "SweepSummary",
    "GapReport",
    "DirectionalResult",
    "seed_sweep",
    "gap_report",
    "save_sweep",
    "load_sweep",
    "subsample_study",
    "write_subsample_csv",
    "comparison_rows",
    "write_comparison_csv",
    "format_comparison",
    "compare_ft_lnsr",
    "directional_study",
    "directional_verdict",
    "DEFAULT_RATIOS",
]
