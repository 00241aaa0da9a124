"""Reduced block-weight dynamics and record-driven filter banks.

Under the QND structure the block weights evolve autonomously, so an
N-dimensional positive vector (or an n_candidates x n_blocks matrix for a
filter bank) replaces the full density matrix.  Every update here is a
per-step frozen-coefficient stochastic exponential applied in log space:
positivity and zero-absorption hold exactly, and weights only die by genuine
exponential decay (clamped at ``UNDERFLOW_FLOOR``).

One kernel serves all three dynamics.  The true weights driven by Wiener
increments are the same update as a record-driven filter fed its own record,
so :func:`true_weight_step` simply synthesizes the record increment first.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import DegenerateIntensityError
from .model import QndModel, jump_rate_table
from .streams import TrajectoryStream

UNDERFLOW_FLOOR = 1e-300
LOG_FLOOR = np.log(UNDERFLOW_FLOOR)


# -- parameters and compiled coefficients -----------------------------------------------


@dataclass(frozen=True)
class FilterParams:
    """Estimated scalar parameters a filter runs with (operators are known).

    Shapes mirror the model's parameter fields.  Physical-range checks are
    deliberately looser than for the true model: candidates only need every
    compiled jump rate strictly positive.
    """

    eta: np.ndarray
    gamma: np.ndarray
    iota: np.ndarray
    theta: np.ndarray
    zeta: np.ndarray

    def __post_init__(self):
        for name in ("eta", "gamma", "iota", "theta"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(-1))
        object.__setattr__(self, "zeta", np.atleast_2d(np.asarray(self.zeta, dtype=float)))

    @classmethod
    def from_model(cls, model: QndModel) -> "FilterParams":
        """Perfectly calibrated parameters."""
        return cls(
            eta=model.eta.copy(),
            gamma=model.gamma.copy(),
            iota=model.iota.copy(),
            theta=model.theta.copy(),
            zeta=model.zeta.copy(),
        )

    def with_values(self, **kwargs) -> "FilterParams":
        return replace(self, **kwargs)


def filter_jump_rates(model: QndModel, params: FilterParams) -> np.ndarray:
    """Compiled per-(channel, block) counting rates for a candidate parameter set."""
    if model.n_jump == 0:
        return np.zeros((0, model.blocks.n_blocks))
    mag2 = np.abs(model.c_coeffs) ** 2
    return params.theta[:, None] + (params.zeta * params.iota[None, :]) @ mag2


@dataclass(frozen=True)
class BankCoefficients:
    """Everything a filter bank needs per step.

    ``drift`` has shape (n_diffusive, n_candidates, n_blocks): the candidate's
    diffusive coupling scale times the block's real measurement coefficient.
    ``jump_rates`` has shape (n_jump, n_candidates, n_blocks); filters require
    them strictly positive, the true dynamics tolerates zeros (a jump then
    kills the block weight exactly).
    """

    drift: np.ndarray
    jump_rates: np.ndarray

    @property
    def n_candidates(self) -> int:
        return self.drift.shape[1] if self.drift.size else self.jump_rates.shape[1]

    @cached_property
    def log_jump_rates(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.jump_rates)


def bank_coefficients(model: QndModel, bank: Sequence[FilterParams]) -> BankCoefficients:
    """Compile a candidate bank for filtering; every jump rate must be positive."""
    nb = model.blocks.n_blocks
    re_l = model.l_coeffs.real
    drift = np.empty((model.n_diffusive, len(bank), nb))
    rates = np.empty((model.n_jump, len(bank), nb))
    for n, params in enumerate(bank):
        scale = np.sqrt(params.eta * params.gamma)
        drift[:, n, :] = scale[:, None] * re_l
        rates[:, n, :] = filter_jump_rates(model, params)
    if rates.size and np.any(rates <= 0.0):
        raise ValueError("every candidate jump rate must be strictly positive for filtering")
    return BankCoefficients(drift=drift, jump_rates=rates)


def filter_coefficients(model: QndModel, params: FilterParams) -> BankCoefficients:
    return bank_coefficients(model, [params])


def true_coefficients(model: QndModel) -> BankCoefficients:
    """Coefficients of the true weight dynamics (a bank of one)."""
    re_l = model.l_coeffs.real
    scale = np.sqrt(model.eta * model.gamma)
    drift = (scale[:, None] * re_l)[:, None, :]
    rates = jump_rate_table(model)[:, None, :]
    return BankCoefficients(drift=drift, jump_rates=rates)


# -- the shared stochastic-exponential kernel --------------------------------------------


def record_step(
    q: np.ndarray,
    coeffs: BankCoefficients,
    dY: np.ndarray,
    jump_flags: np.ndarray,
    dt: float,
) -> np.ndarray:
    """One frozen-coefficient stochastic-exponential update driven by a record.

    ``q`` has shape (..., n_candidates, n_blocks) and is renormalized on exit.
    Zero entries are absorbing; positive entries that decay past the floor are
    clamped there (numerically extinct).  Raises
    :class:`DegenerateIntensityError` when a jump arrives on a channel whose
    mixture intensity has underflowed.
    """
    q = np.asarray(q, dtype=float)
    dY = np.asarray(dY, dtype=float)
    jump_flags = np.asarray(jump_flags)
    expo = np.zeros_like(q)

    nd = coeffs.drift.shape[0]
    for k in range(nd):
        mean = np.einsum("...nj,nj->...", q, coeffs.drift[k])[..., None, None]
        centered = coeffs.drift[k] - mean  # (..., n, j)
        innov = dY[..., k, None, None] - 2.0 * mean * dt
        expo += 2.0 * centered * innov - 2.0 * centered**2 * dt

    nj = coeffs.jump_rates.shape[0]
    for k in range(nj):
        rates = coeffs.jump_rates[k]
        mix = np.einsum("...nj,nj->...", q, rates)
        fired = jump_flags[..., k]
        if np.any((mix <= 0.0) & (fired > 0)):
            raise DegenerateIntensityError(f"jump on channel {k} with zero mixture intensity")
        safe_mix = np.where(mix > 0.0, mix, 1.0)
        # log_ratio is -inf where a candidate rate is exactly zero; a fired jump
        # there kills the coordinate, an unfired step must contribute nothing.
        log_ratio = coeffs.log_jump_rates[k] - np.log(safe_mix)[..., None, None]
        expo += np.where(fired[..., None, None] > 0, log_ratio, 0.0)
        expo -= (rates - mix[..., None, None]) * dt

    with np.errstate(divide="ignore"):
        logq = np.where(q > 0.0, np.log(np.maximum(q, UNDERFLOW_FLOOR)), -np.inf) + expo
    shift = logq.max(axis=(-2, -1), keepdims=True)
    w = np.exp(logq - shift)
    total = w.sum(axis=(-2, -1), keepdims=True)
    out = w / total
    # Positive coordinates never reach exact zero: clamp at the floor.
    out = np.where((q > 0.0) & (out < UNDERFLOW_FLOOR), UNDERFLOW_FLOOR, out)
    return out


def _as_bank_shape(q: np.ndarray) -> np.ndarray:
    return np.asarray(q, dtype=float)[..., None, :]


def true_weight_step(
    model: QndModel,
    q: np.ndarray,
    dW: np.ndarray,
    jump_flags: np.ndarray,
    dt: float,
) -> np.ndarray:
    """Advance the true block weights one step from Wiener increments and jump flags.

    Synthesizes the record increment the weights generate and feeds the shared
    record-driven kernel; the two forms are the same update written in
    different variables.
    """
    coeffs = true_coefficients(model)
    qb = _as_bank_shape(q)
    dW = np.asarray(dW, dtype=float)
    mean = np.einsum("...nj,knj->...k", qb, coeffs.drift)
    dY = dW + 2.0 * mean * dt
    return record_step(qb, coeffs, dY, jump_flags, dt)[..., 0, :]


def filter_step(
    model: QndModel,
    params: FilterParams,
    q: np.ndarray,
    dY: np.ndarray,
    jump_flags: np.ndarray,
    dt: float,
) -> np.ndarray:
    """Record-driven update of a single candidate's block weights."""
    coeffs = filter_coefficients(model, params)
    return record_step(_as_bank_shape(q), coeffs, dY, jump_flags, dt)[..., 0, :]


@dataclass(frozen=True)
class BankState:
    """Joint weights of a filter bank on the (candidates x blocks) simplex."""

    weights: np.ndarray  # (n_candidates, n_blocks), sums to 1

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "weights", w)
        if w.ndim != 2:
            raise ValueError("bank state must be (n_candidates, n_blocks)")
        if np.any(w < 0.0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("bank state must be a probability table")

    @property
    def selection(self) -> np.ndarray:
        """Per-candidate likelihood weights (row sums)."""
        return self.weights.sum(axis=-1)

    @classmethod
    def factorized(cls, prior: np.ndarray, block_weights: np.ndarray) -> "BankState":
        prior = np.asarray(prior, dtype=float)
        block_weights = np.asarray(block_weights, dtype=float)
        return cls(np.outer(prior / prior.sum(), block_weights / block_weights.sum()))


def bank_filter_step(
    model: QndModel,
    coeffs: BankCoefficients,
    state: BankState,
    dY: np.ndarray,
    jump_flags: np.ndarray,
    dt: float,
) -> BankState:
    """Advance the whole bank one record step; selection weights are row sums."""
    return BankState(record_step(state.weights, coeffs, dY, jump_flags, dt))


# -- vectorized path runners --------------------------------------------------------------


def run_bank(
    coeffs: BankCoefficients,
    q0: np.ndarray,
    dY: np.ndarray,
    dN: np.ndarray,
    dt: float,
    checkpoint_stride: int = 0,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Run a bank over a whole record (or batch of records).

    ``dY`` has shape (..., steps, n_diffusive) and ``dN`` (..., steps, n_jump);
    ``q0`` broadcasts against the batch with trailing shape
    (n_candidates, n_blocks).  Returns the final weights and, when
    ``checkpoint_stride`` > 0, the weight table sampled every that many steps
    (including step 0 and the final step).
    """
    dY = np.asarray(dY, dtype=float)
    steps = dY.shape[-2]
    batch = dY.shape[:-2]
    q = np.broadcast_to(np.asarray(q0, dtype=float), batch + q0.shape[-2:]).copy()
    path = []
    if checkpoint_stride:
        path.append(q.copy())
    for s in range(steps):
        q = record_step(q, coeffs, dY[..., s, :], dN[..., s, :], dt)
        if checkpoint_stride and ((s + 1) % checkpoint_stride == 0 or s + 1 == steps):
            path.append(q.copy())
    return q, (np.stack(path, axis=-3) if checkpoint_stride else None)


class WeightTruthSimulator:
    """Vectorized generator of true weight trajectories and their records.

    Keeps an (n_traj, n_blocks) weight ensemble and hands out record chunks so
    a campaign can feed filters without materializing whole records.  Noise
    per trajectory comes from the same counter-based streams as the full-state
    simulator, in the same per-chunk order.
    """

    def __init__(
        self,
        model: QndModel,
        q0: np.ndarray,
        dt: float,
        seed: int,
        n_traj: int,
        round_index: int = 0,
    ):
        from .sme import thinning_guard_ok  # local import to avoid a cycle

        thinning_guard_ok(model, dt)
        self.model = model
        self.coeffs = true_coefficients(model)
        self.dt = float(dt)
        nb = model.blocks.n_blocks
        q0 = np.asarray(q0, dtype=float)
        self.q = np.broadcast_to(q0, (n_traj, nb)).copy()
        self._q_bank = self.q[:, None, :]
        self.streams = [TrajectoryStream(seed, t, round_index) for t in range(n_traj)]
        self.steps_done = 0

    def advance(self, steps: int) -> tuple[np.ndarray, np.ndarray]:
        """Advance every trajectory ``steps`` steps; returns (dY, dN) for the chunk."""
        model, dt = self.model, self.dt
        nd, nj = model.n_diffusive, model.n_jump
        n_traj = self.q.shape[0]
        normals = np.empty((n_traj, steps, nd))
        uniforms = np.empty((n_traj, steps, nj))
        for t, stream in enumerate(self.streams):
            z, u = stream.step_noise(steps, nd, nj)
            normals[t] = z
            uniforms[t] = u
        sqrt_dt = np.sqrt(dt)
        dY = np.empty((n_traj, steps, nd))
        dN = np.empty((n_traj, steps, nj), dtype=np.int8)
        qb = self._q_bank
        for s in range(steps):
            drift_mean = np.einsum("mnj,knj->mk", qb, self.coeffs.drift)
            dY[:, s] = normals[:, s] * sqrt_dt + 2.0 * drift_mean * dt
            if nj:
                mix = np.einsum("mnj,knj->mk", qb, self.coeffs.jump_rates)
                dN[:, s] = uniforms[:, s] < np.minimum(mix * dt, 1.0)
            qb = record_step(qb, self.coeffs, dY[:, s], dN[:, s], dt)
        self._q_bank = qb
        self.q = qb[:, 0, :]
        self.steps_done += steps
        return dY, dN

    def limit_blocks(self, tol: float = 1e-6) -> np.ndarray:
        """Realized limit block per trajectory, -1 while unresolved."""
        resolved = self.q.max(axis=-1) > 1.0 - tol
        return np.where(resolved, np.argmax(self.q, axis=-1), -1)


# -- diagnostics ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SlopeFit:
    """Least-squares slope of a log-ratio path over the tail window."""

    slope: float
    floored: bool  # some ratio value sat at the underflow floor


def log_ratio_slope(times: np.ndarray, path_n: np.ndarray, path_ref: np.ndarray) -> SlopeFit:
    """Slope of log(path_n / path_ref) fitted on the final half of the horizon.

    Values at or below the underflow floor are clamped there and flagged.
    """
    times = np.asarray(times, dtype=float)
    num = np.asarray(path_n, dtype=float)
    den = np.asarray(path_ref, dtype=float)
    floored = bool(np.any(num <= UNDERFLOW_FLOOR) or np.any(den <= UNDERFLOW_FLOOR))
    ratio = np.log(np.maximum(num, UNDERFLOW_FLOOR)) - np.log(np.maximum(den, UNDERFLOW_FLOOR))
    cut = times >= times[0] + 0.5 * (times[-1] - times[0])
    t, y = times[cut], ratio[cut]
    if len(t) < 2:
        raise ValueError("need at least two tail points for a slope")
    slope = float(np.polyfit(t, y, 1)[0])
    return SlopeFit(slope=slope, floored=floored)


def selection_log_slope(times: np.ndarray, pi_path: np.ndarray, n: int, nstar: int) -> SlopeFit:
    """Tail slope of log(pi_n / pi_nstar) along one trajectory."""
    pi_path = np.asarray(pi_path, dtype=float)
    return log_ratio_slope(times, pi_path[:, n], pi_path[:, nstar])


def reweighted_mean(values: np.ndarray, weights_final: np.ndarray, weights_initial: np.ndarray) -> float:
    """Monte-Carlo mean under the block-conditioned measure.

    Each sample is reweighted by its terminal-to-initial block weight ratio;
    the weights are a martingale, so the reweighted ensemble targets the
    conditioned expectation.
    """
    w0 = np.asarray(weights_initial, dtype=float)
    if np.any(w0 <= 0.0):
        raise ValueError("initial block weights must be positive for reweighting")
    ratio = np.asarray(weights_final, dtype=float) / w0
    return float(np.mean(np.asarray(values, dtype=float) * ratio))
