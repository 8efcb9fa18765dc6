"""Experiment drivers: hidden-unit sweep, memory frontier, generalization splits
and intermediate-state analysis.

Runs are executed one after another in run-id order with seeds derived from
the experiment seed, so aggregated outputs do not depend on scheduling.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import probe_lab, trainer
from .nn_core import ModelParams
from .trainer import EncodedCorpus, ErrorReport, TrainConfig

log = logging.getLogger(__name__)

AXES = ("distance", "embedded-depth")
MODES = ("regular-interpolation", "random-interpolation", "extrapolation")
DEFAULT_THRESHOLD = {"distance": 11, "embedded-depth": 13}


def derive_seed(base: int, *keys: int) -> int:
    return int(np.random.SeedSequence([base, *keys]).generate_state(1)[0])


def _axis_values(table, axis: str) -> np.ndarray:
    return table.distance if axis == "distance" else table.embedded_depth


# ---------------------------------------------------------------------------
# split rules


@dataclass(frozen=True)
class SplitSpec:
    axis: str = "distance"
    mode: str = "regular-interpolation"
    threshold: int | None = None
    chosen: tuple[int, ...] | None = None  # D for random interpolation, once resolved

    def __post_init__(self):
        axis = {"depth": "embedded-depth", "embedded_depth": "embedded-depth"}.get(self.axis, self.axis)
        mode = {"regular": "regular-interpolation", "random": "random-interpolation",
                "extrapolate": "extrapolation"}.get(self.mode, self.mode)
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "mode", mode)
        if axis not in AXES:
            raise ValueError(f"axis must be one of {AXES}, got {self.axis!r}")
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if mode == "extrapolation" and self.threshold is None:
            object.__setattr__(self, "threshold", DEFAULT_THRESHOLD[axis])

    def resolve(self, present_values, rng: np.random.Generator) -> "SplitSpec":
        """Draw D (half of the axis values present) for random interpolation."""
        if self.mode != "random-interpolation":
            return self
        values = np.unique(np.asarray(present_values))
        chosen = rng.choice(values, size=len(values) // 2, replace=False)
        return replace(self, chosen=tuple(sorted(int(v) for v in chosen)))

    def in_sample(self, values) -> np.ndarray:
        v = np.asarray(values)
        if self.mode == "regular-interpolation":
            # distance 2, 6, 10, ...; odd embedded depth
            return (v % 4 == 2) if self.axis == "distance" else (v % 2 == 1)
        if self.mode == "extrapolation":
            return v < self.threshold
        if self.chosen is None:
            raise ValueError("random interpolation needs resolve() before use")
        return np.isin(v, self.chosen)

    def to_dict(self) -> dict:
        return {"axis": self.axis, "mode": self.mode, "threshold": self.threshold,
                "chosen": list(self.chosen) if self.chosen is not None else None}


# ---------------------------------------------------------------------------
# hidden-unit sweep


@dataclass
class RunResult:
    hidden_units: int
    seed: int
    report: ErrorReport | None
    history: list[dict]
    params: ModelParams | None = None
    diverged: str | None = None

    @property
    def error_rate(self) -> float:
        return self.report.error_rate if self.report is not None else float("nan")


def sweep_units(train: EncodedCorpus, test: EncodedCorpus, units, cfg: TrainConfig, seeds=(0,),
                keep_params: bool = False) -> list[RunResult]:
    """One model per (H, seed) on a shared split; divergence is recorded, not raised."""
    units = list(units)
    if not units:
        raise ValueError("unit list must not be empty")
    results = []
    for H in units:
        for s in seeds:
            run_cfg = replace(cfg, hidden_units=H, seed=derive_seed(cfg.seed, H, s))
            try:
                params, history = trainer.fit(train, test, run_cfg)
            except trainer.TrainingDiverged as exc:
                log.warning("H=%d seed=%d diverged: %s", H, s, exc)
                results.append(RunResult(H, s, None, exc.history, diverged=str(exc)))
                continue
            report = trainer.evaluate(params, test)
            log.info("sweep H=%d seed=%d test error %.4f", H, s, report.error_rate)
            results.append(RunResult(H, s, report, history, params if keep_params else None))
    return results


def pooled_buckets(results: list[RunResult], axis: str) -> dict[int, dict[int, tuple[int, int]]]:
    """Per-H bucket tables (value -> (count, errors)) summed over seeds."""
    out: dict[int, dict[int, tuple[int, int]]] = {}
    for r in results:
        if r.report is None:
            continue
        table = out.setdefault(r.hidden_units, {})
        for v, (c, e) in r.report.buckets(axis).items():
            c0, e0 = table.get(v, (0, 0))
            table[v] = (c0 + c, e0 + e)
    return out


# ---------------------------------------------------------------------------
# memory frontier


@dataclass
class FrontierPoint:
    hidden_units: int
    max_metric: int
    tolerance: float = 0.05


@dataclass
class LogFit:
    slope: float
    intercept: float
    residuals: list[float]

    def __call__(self, H):
        return self.slope * np.log(H) + self.intercept


def frontier_value(buckets: dict[int, tuple[int, int]], tolerance: float) -> int:
    """Largest bucket value b such that every observed bucket <= b is within tolerance."""
    best = 0
    for v in sorted(buckets):
        c, e = buckets[v]
        if c == 0:
            continue
        if e / c > tolerance:
            break
        best = v
    return int(best)


def fit_log(points: list[FrontierPoint]) -> LogFit | None:
    """Least squares of max_metric on log(H)."""
    if len({p.hidden_units for p in points}) < 2:
        return None
    x = np.log([p.hidden_units for p in points])
    y = np.array([p.max_metric for p in points], dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    return LogFit(float(slope), float(intercept), [float(r) for r in resid])


def memory_frontier(tables: dict[int, dict[int, tuple[int, int]]], tolerance: float = 0.05
                    ) -> tuple[list[FrontierPoint], LogFit | None]:
    if not 0.0 < tolerance <= 1.0:
        raise ValueError("tolerance must lie in (0, 1]")
    points = [FrontierPoint(H, frontier_value(tables[H], tolerance), tolerance) for H in sorted(tables)]
    return points, fit_log(points)


# ---------------------------------------------------------------------------
# generalization


@dataclass
class GeneralizationResult:
    spec: SplitSpec
    hidden_units: int
    runs: list[dict] = field(default_factory=list)  # per repeat: spec, in/out reports

    def _errors(self, which: str) -> np.ndarray:
        return np.array([r[which].error_rate for r in self.runs if r[which] is not None])

    @property
    def in_errors(self) -> np.ndarray:
        return self._errors("in_report")

    @property
    def out_errors(self) -> np.ndarray:
        return self._errors("out_report")

    def weighted_error(self, which: str) -> float:
        """Instance-weighted error pooled over all repeats."""
        reps = [r[which] for r in self.runs if r[which] is not None]
        c = sum(rep.count for rep in reps)
        return sum(rep.errors for rep in reps) / c if c else float("nan")

    @property
    def ratio(self) -> float:
        inn = self.weighted_error("in_report")
        return self.weighted_error("out_report") / inn if inn > 0 else float("inf")

    def curve(self, which: str) -> dict[int, dict]:
        """Per-bucket error mean/min/max across repeats, plus pooled counts."""
        per_value: dict[int, list[float]] = {}
        counts: dict[int, int] = {}
        for r in self.runs:
            rep = r[which]
            if rep is None:
                continue
            for v, (c, e) in rep.buckets(self.spec.axis).items():
                if c:
                    per_value.setdefault(v, []).append(e / c)
                    counts[v] = counts.get(v, 0) + c
        return {v: {"count": counts[v], "mean": float(np.mean(x)), "min": float(np.min(x)), "max": float(np.max(x))}
                for v, x in sorted(per_value.items())}


def run_generalization(train: EncodedCorpus, test: EncodedCorpus, spec: SplitSpec, hidden_units: int,
                       repeats: int, cfg: TrainConfig) -> GeneralizationResult:
    """Train only on in-sample instances; score in- and out-of-sample test instances separately."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    result = GeneralizationResult(spec, hidden_units)
    train_vals = _axis_values(train.table, spec.axis)
    for r in range(repeats):
        run_seed = derive_seed(cfg.seed, hidden_units, r)
        concrete = spec.resolve(np.concatenate([train_vals, _axis_values(test.table, spec.axis)]),
                                np.random.default_rng([run_seed, 0xD]))
        if not concrete.in_sample(train_vals).any():
            raise ValueError(f"split {concrete.to_dict()} selects no training instances")
        run_cfg = replace(cfg, hidden_units=hidden_units, seed=run_seed)
        try:
            params, history = trainer.fit(train, None, run_cfg,
                                          select=lambda t, sp=concrete: sp.in_sample(_axis_values(t, sp.axis)))
        except trainer.TrainingDiverged as exc:
            log.warning("generalization repeat %d diverged: %s", r, exc)
            result.runs.append({"repeat": r, "seed": run_seed, "spec": concrete, "in_report": None,
                                "out_report": None, "diverged": str(exc)})
            continue
        pred = trainer.instance_predictions(params, test)
        in_mask = concrete.in_sample(_axis_values(test.table, spec.axis))
        reports = {}
        for name, mask in (("in_report", in_mask), ("out_report", ~in_mask)):
            reports[name] = trainer.report_from_predictions(pred[mask], test.table.subset(mask)) if mask.any() else None
        log.info("generalization repeat %d: in %.4f out %s", r, reports["in_report"].error_rate,
                 None if reports["out_report"] is None else round(reports["out_report"].error_rate, 4))
        result.runs.append({"repeat": r, "seed": run_seed, "spec": concrete, **reports, "diverged": None,
                            "history": history})
    return result


# ---------------------------------------------------------------------------
# intermediate state analysis


@dataclass
class StateAnalysis:
    scalar: dict[int, probe_lab.ScalarReport] = field(default_factory=dict)
    sequence: dict[int, probe_lab.SequenceReport] = field(default_factory=dict)


def probe_datasets(params: ModelParams, data: EncodedCorpus, cfg: probe_lab.ProbeConfig):
    sent, pos = probe_lab.sample_positions(data, cfg.positions_per_sentence, cfg.seed)
    ds = probe_lab.extract_states(params, data, sent, pos)
    return probe_lab.split_by_sentence(ds, cfg.fit_fraction, cfg.seed)


def run_state_analysis(scalar_models: dict[int, ModelParams], sequence_models: dict[int, ModelParams],
                       data: EncodedCorpus, cfg: probe_lab.ProbeConfig = probe_lab.ProbeConfig()) -> StateAnalysis:
    """Depth probes for each model in ``scalar_models``, previous-character probes for ``sequence_models``.

    ``data`` should be held-out (test-half) sentences; each probe is fitted on
    half of them and reported on the other half.
    """
    out = StateAnalysis()
    for H, params in sorted(scalar_models.items()):
        fit, held = probe_datasets(params, data, cfg)
        _, rep = probe_lab.train_scalar_probe(fit, cfg, evaluate_on=held)
        log.info("depth probe H=%d: MAE %.3f (baseline %.3f)", H, rep.mae, rep.baseline_mae)
        out.scalar[H] = rep
    for H, params in sorted(sequence_models.items()):
        fit, held = probe_datasets(params, data, cfg)
        _, rep = probe_lab.train_sequence_probe(fit, cfg.lookback, cfg, evaluate_on=held)
        log.info("sequence probe H=%d: k=4 relevant %.3f irrelevant %.3f", H, rep.error(4, True), rep.error(4, False))
        out.sequence[H] = rep
    return out


def ordering_margin(errors: dict[int, float]) -> float:
    """error(smallest H) - error(largest H)."""
    hs = sorted(errors)
    return errors[hs[0]] - errors[hs[-1]] if len(hs) >= 2 else math.nan
