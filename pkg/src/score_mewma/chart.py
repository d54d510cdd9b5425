"""Score-based multivariate EWMA chart.

The chart smooths per-patient score vectors with W_t = R S_t + (I - R) W_{t-1}
and monitors the quadratic form T2_t = W_t' Sigma_W_t^{-1} W_t against a
control limit h. Sigma_W_t evolves deterministically from the score
covariance, either by the exact recursion or by its asymptotic limit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .errors import ModelConfigError, SingularMatrixError
from .likelihood import per_record_scores
from .model import DagModelSpec, ParamVector, PatientData, PatientRecord

EXACT_RECURSIVE = "exact-recursive"
ASYMPTOTIC = "asymptotic"

COND_LIMIT = 1e12


@dataclass(frozen=True)
class ChartConfig:
    """Immutable chart parameters.

    ``r`` is the smoothing weight, a scalar broadcast to every monitored
    coordinate or a full vector. ``coords`` optionally restricts monitoring
    to a subset of score coordinates; ``sigma_s`` must then match that
    subset's dimension (use ``submatrix`` helpers upstream).
    """

    sigma_s: np.ndarray
    r: float | tuple[float, ...] = 0.1
    h: float | None = None
    covariance_mode: str = EXACT_RECURSIVE
    warmup: int = 1
    coords: tuple[int, ...] | None = None
    coord_names: tuple[str, ...] | None = None
    r_vec: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        sigma = np.array(self.sigma_s, dtype=float)
        if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
            raise ModelConfigError("sigma_s must be a square matrix")
        if not np.allclose(sigma, sigma.T, rtol=0.0, atol=1e-12):
            raise ModelConfigError("sigma_s must be symmetric")
        try:
            np.linalg.cholesky(sigma)
        except np.linalg.LinAlgError:
            raise ModelConfigError("sigma_s must be positive definite") from None
        sigma.flags.writeable = False
        object.__setattr__(self, "sigma_s", sigma)

        r = np.atleast_1d(np.asarray(self.r, dtype=float))
        if r.size == 1:
            r = np.full(sigma.shape[0], float(r[0]))
        if r.shape != (sigma.shape[0],):
            raise ModelConfigError("r must be a scalar or one value per monitored coordinate")
        if not ((r > 0.0) & (r <= 1.0)).all():
            raise ModelConfigError("smoothing values must lie in (0, 1]")
        r.flags.writeable = False
        object.__setattr__(self, "r_vec", r)

        if self.h is not None and not self.h > 0.0:
            raise ModelConfigError("control limit h must be positive")
        if self.covariance_mode not in (EXACT_RECURSIVE, ASYMPTOTIC):
            raise ModelConfigError(f"unknown covariance_mode {self.covariance_mode!r}")
        if self.warmup < 1:
            raise ModelConfigError("warmup must be at least 1")
        if self.coords is not None:
            object.__setattr__(self, "coords", tuple(int(i) for i in self.coords))
            if len(self.coords) != sigma.shape[0]:
                raise ModelConfigError("coords length must match sigma_s dimension")

    @property
    def p(self) -> int:
        return self.sigma_s.shape[0]

    @property
    def equal_r(self) -> bool:
        return bool(np.all(self.r_vec == self.r_vec[0]))

    def with_h(self, h: float) -> "ChartConfig":
        return ChartConfig(
            sigma_s=self.sigma_s,
            r=tuple(self.r_vec),
            h=h,
            covariance_mode=self.covariance_mode,
            warmup=self.warmup,
            coords=self.coords,
            coord_names=self.coord_names,
        )

    def select_scores(self, scores: np.ndarray) -> np.ndarray:
        """Apply the coordinate mask to a score vector or matrix."""
        if self.coords is None:
            return scores
        return scores[..., list(self.coords)]

    def sigma_w_asymptotic(self) -> np.ndarray:
        r = self.r_vec
        denom = r[:, None] + r[None, :] - r[:, None] * r[None, :]
        return (r[:, None] * r[None, :] / denom) * self.sigma_s


def sigma_w_closed_form(t: int, r: float, sigma_s: np.ndarray) -> np.ndarray:
    """Covariance of W_t for equal smoothing: r[1-(1-r)^{2t}]/(2-r) Sigma_S."""
    r_arr = np.atleast_1d(np.asarray(r, dtype=float))
    if not np.all(r_arr == r_arr[0]):
        raise ModelConfigError("closed form requires equal smoothing across coordinates")
    r = float(r_arr[0])
    if not 0.0 < r <= 1.0:
        raise ModelConfigError("smoothing value must lie in (0, 1]")
    if t < 1:
        raise ModelConfigError("t must be at least 1")
    factor = r * (1.0 - (1.0 - r) ** (2 * t)) / (2.0 - r)
    return factor * np.asarray(sigma_s, dtype=float)


@dataclass(frozen=True)
class MewmaState:
    """Chart state after t patients; fresh states have w = 0 and t = 0."""

    config: ChartConfig
    w: np.ndarray
    t: int
    sigma_w: np.ndarray


def init_state(config: ChartConfig) -> MewmaState:
    p = config.p
    return MewmaState(config=config, w=np.zeros(p), t=0, sigma_w=np.zeros((p, p)))


def _quadratic_form(w: np.ndarray, sigma_w: np.ndarray, coord_names) -> float:
    evals = np.linalg.eigvalsh(sigma_w)
    if evals[0] <= 0.0 or evals[-1] / evals[0] > COND_LIMIT:
        _, evecs = np.linalg.eigh(sigma_w)
        null = np.abs(evecs[:, 0])
        worst = np.argsort(null)[::-1][:3]
        labels = [coord_names[i] if coord_names else str(i) for i in worst]
        raise SingularMatrixError(
            "chart covariance is numerically singular "
            f"(condition number above {COND_LIMIT:.0e}); offending coordinates: {', '.join(labels)}"
        )
    return float(w @ np.linalg.solve(sigma_w, w))


def update(state: MewmaState, s_t: np.ndarray) -> tuple[MewmaState, float, bool]:
    """Advance the chart one patient; returns (new state, t2, signal).

    ``s_t`` must already be in chart coordinates (masked if the config uses
    a coordinate subset).
    """
    cfg = state.config
    s = np.asarray(s_t, dtype=float).reshape(-1)
    if s.shape != (cfg.p,):
        raise ModelConfigError(f"score vector must have length {cfg.p}, got {s.shape[0]}")
    r = cfg.r_vec
    w = r * s + (1.0 - r) * state.w
    t = state.t + 1
    if cfg.covariance_mode == EXACT_RECURSIVE:
        sigma_w = (
            np.outer(r, r) * cfg.sigma_s
            + np.outer(1.0 - r, 1.0 - r) * state.sigma_w
        )
    else:
        sigma_w = cfg.sigma_w_asymptotic()
    t2 = _quadratic_form(w, sigma_w, cfg.coord_names)
    signal = t >= cfg.warmup and cfg.h is not None and t2 > cfg.h
    return MewmaState(config=cfg, w=w, t=t, sigma_w=sigma_w), t2, bool(signal)


def run_stream(
    spec: DagModelSpec,
    params0: ParamVector,
    config: ChartConfig,
    records: Iterable[PatientRecord] | PatientData,
    stop_at_signal: bool = False,
) -> Iterator[tuple[int, float, bool]]:
    """Score each record at params0, feed the chart, yield (t, t2, signal).

    Records are consumed lazily so the stream can sit on a live feed.
    """
    if isinstance(records, PatientData):
        records = records.records()
    state = init_state(config)
    for record in records:
        s = per_record_scores(spec, params0, [record])[0]
        state, t2, signal = update(state, config.select_scores(s))
        yield state.t, t2, signal
        if signal and stop_at_signal:
            return
