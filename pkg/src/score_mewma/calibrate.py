"""In-control ARL estimation and control-limit calibration.

calibrate_h brackets the target by doubling, then bisects, exploiting that
the ARL is nondecreasing in h. Within each stage of the replication schedule
all limits are evaluated against the same simulated streams (via prefix
maxima of the T2 paths), so the bisected function is exactly monotone and
one simulation pass per stage suffices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from .chart import ChartConfig, run_stream
from .errors import CalibrationError, ModelConfigError
from .mc import PatientGenerator, replication_rng, sample_patients, simulate_run_lengths

H_MAX = 1e6


@dataclass(frozen=True)
class ArlResult:
    """Monte Carlo run-length summary.

    Replications that never signal are censored at max_rl and still counted
    in the mean, so with censored > 0 the mean is a lower bound on the ARL.
    """

    mean_rl: float
    std_error: float
    reps: int
    censored: int
    max_rl: int
    run_lengths: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.mean_rl < 1.0 or self.std_error < 0.0 or self.censored > self.reps:
            raise ModelConfigError("inconsistent run-length summary")

    @property
    def censored_warning(self) -> bool:
        return self.censored > 0

    def as_dict(self) -> dict:
        out = {
            "mean_rl": float(self.mean_rl),
            "std_error": float(self.std_error),
            "reps": int(self.reps),
            "censored": int(self.censored),
            "max_rl": int(self.max_rl),
        }
        if self.censored_warning:
            out["censored_warning"] = True
        return out


@dataclass(frozen=True)
class CalibrationResult:
    h: float
    achieved_arl: ArlResult
    iterations: int
    bracket: tuple[float, float]
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        lo, hi = self.bracket
        if not lo < self.h <= hi:
            raise ModelConfigError("calibrated limit must lie inside its bracket")


def _summarize(run_lengths: np.ndarray, resolved: np.ndarray, max_rl: int) -> ArlResult:
    reps = run_lengths.shape[0]
    mean = float(run_lengths.mean())
    se = float(run_lengths.std(ddof=1) / math.sqrt(reps)) if reps > 1 else 0.0
    return ArlResult(
        mean_rl=mean,
        std_error=se,
        reps=reps,
        censored=int((~resolved).sum()),
        max_rl=max_rl,
        run_lengths=run_lengths,
    )


def estimate_arl(
    generator: PatientGenerator,
    params0,
    config: ChartConfig,
    reps: int,
    max_rl: int,
    seed,
    threads: int | None = None,
    phase1_size: int | None = None,
) -> ArlResult:
    """Zero-state ARL of the chart under the given generator.

    Each replication draws a fresh patient stream from its own RNG stream and
    runs until the first signal or max_rl (censored). With ``phase1_size``
    set, every replication first refits the reference coefficients on a fresh
    in-control sample of that size and monitors at the refitted values,
    propagating estimation uncertainty into the run lengths.
    """
    if config.h is None:
        raise ModelConfigError("config.h must be set to estimate an ARL")
    if phase1_size is not None:
        return _estimate_arl_phase1(generator, params0, config, reps, max_rl, seed, phase1_size)
    sample = simulate_run_lengths(
        generator, params0, config, reps=reps, max_rl=max_rl, seed=seed, threads=threads
    )
    return _summarize(sample.run_lengths, sample.resolved, max_rl)


def _estimate_arl_phase1(generator, params0, config, reps, max_rl, seed, phase1_size) -> ArlResult:
    """Reference-path variant with a per-replication Phase-I refit."""
    from .likelihood import expected_score_covariance, fit_mle

    if phase1_size < 1:
        raise ModelConfigError("phase1_size must be at least 1")
    spec = generator.spec
    in_control = PatientGenerator(spec=spec, params=params0, covariates=generator.covariates)
    run_lengths = np.full(reps, max_rl, dtype=np.int64)
    resolved = np.zeros(reps, dtype=bool)
    for rep in range(reps):
        rng = replication_rng(seed, rep)
        phase1 = sample_patients(in_control, phase1_size, rng)
        fit = fit_mle(spec, phase1, params_init=params0)
        sigma = expected_score_covariance(spec, fit.params, generator.covariates).values
        if config.coords is not None:
            sigma = sigma[np.ix_(config.coords, config.coords)]
        rep_config = ChartConfig(
            sigma_s=sigma,
            r=tuple(config.r_vec),
            h=config.h,
            covariance_mode=config.covariance_mode,
            warmup=config.warmup,
            coords=config.coords,
            coord_names=config.coord_names,
        )

        def stream():
            remaining = max_rl
            while remaining > 0:
                block = sample_patients(generator, min(256, remaining), rng)
                yield from block.records()
                remaining -= len(block)

        for t, _, signal in run_stream(spec, fit.params, rep_config, stream(), stop_at_signal=True):
            if signal:
                run_lengths[rep] = t
                resolved[rep] = True
                break
    return _summarize(run_lengths, resolved, max_rl)


class _StageEvaluator:
    """ARL(h) on one stage's common streams, for any h up to a growing cap."""

    def __init__(self, generator, params0, config, reps, max_rl, seed_parts, threads, cap0):
        self._args = (generator, params0, config)
        self._reps = reps
        self._max_rl = max_rl
        self._seed_parts = seed_parts
        self._threads = threads
        self._cap = cap0
        self._sample = None

    def _ensure(self, h: float):
        # keep the cap tight: resolving a replication costs about ARL(cap)
        # patients, so a generous cap multiplies the work
        if self._sample is None or h > self._sample.cap:
            self._cap = max(self._cap, 1.1 * h)
            gen, params0, config = self._args
            self._sample = simulate_run_lengths(
                gen,
                params0,
                config,
                reps=self._reps,
                max_rl=self._max_rl,
                seed=self._seed_parts,
                cap=self._cap,
                threads=self._threads,
                track_records=True,
            )

    def arl(self, h: float) -> float:
        self._ensure(h)
        rl, _ = self._sample.at_limit(h)
        return float(rl.mean())

    def result(self, h: float) -> ArlResult:
        self._ensure(h)
        rl, resolved = self._sample.at_limit(h)
        return _summarize(rl, resolved, self._max_rl)


def calibrate_h(
    generator: PatientGenerator,
    params0,
    config: ChartConfig,
    target_arl: float,
    rel_tolerance: float = 0.02,
    reps_schedule: tuple[int, ...] = (1000, 5000, 10000),
    seed=0,
    max_rl: int | None = None,
    threads: int | None = None,
) -> CalibrationResult:
    """Find the control limit whose in-control ARL matches the target.

    Brackets by doubling/halving, then bisects; later schedule stages rerun
    the bracket at higher replication counts. Deterministic for a fixed seed.
    """
    if not target_arl > 1.0:
        raise CalibrationError("target ARL must exceed 1")
    if not reps_schedule:
        raise CalibrationError("reps_schedule must not be empty")
    if max_rl is None:
        max_rl = int(round(20 * target_arl))
    p = config.p
    h_guess = max(1.0, float(chi2.ppf(1.0 - 1.0 / target_arl, df=p)))
    base = tuple(int(s) for s in (seed if isinstance(seed, (tuple, list)) else (seed,)))

    lo = hi = None
    iterations = 0
    warnings: list[str] = []
    evaluator = None
    for stage, reps in enumerate(reps_schedule):
        cap0 = 1.1 * (hi if hi is not None else h_guess)
        evaluator = _StageEvaluator(
            generator, params0, config, reps, max_rl, base + (stage,), threads, cap0=cap0
        )
        if lo is None:
            lo = hi = h_guess
        # restore the bracket invariant arl(lo) < target < arl(hi) on this stage
        while evaluator.arl(lo) >= target_arl:
            hi = lo
            lo /= 1.5
            if lo < 1e-9:
                raise CalibrationError("bracketing failed: ARL above target for arbitrarily small h")
        while evaluator.arl(hi) <= target_arl:
            lo = max(lo, hi)
            hi *= 1.5
            if hi > H_MAX:
                raise CalibrationError(f"bracketing failed: no h below {H_MAX:g} reaches ARL {target_arl}")
        seen: list[tuple[float, float]] = []
        while hi - lo > 5e-4 * hi:
            mid = 0.5 * (lo + hi)
            a = evaluator.arl(mid)
            iterations += 1
            seen.append((mid, a))
            if a < target_arl:
                lo = mid
            else:
                hi = mid
        seen.sort()
        if any(b[1] < a[1] - 1e-9 for a, b in zip(seen, seen[1:])):
            warnings.append(f"stage {stage}: nonmonotone ARL estimates across bisection points")

    h_final = 0.5 * (lo + hi)
    achieved = evaluator.result(h_final)
    if abs(achieved.mean_rl - target_arl) / target_arl >= rel_tolerance:
        raise CalibrationError(
            f"calibration did not reach the target within {rel_tolerance:.0%}: "
            f"achieved {achieved.mean_rl:.2f} for target {target_arl:g}; increase the final-stage reps"
        )
    return CalibrationResult(
        h=h_final,
        achieved_arl=achieved,
        iterations=iterations,
        bracket=(lo, hi),
        warnings=tuple(warnings),
    )
