"""Full density-matrix dynamics under simultaneous diffusive and counting records.

The conditional state follows a jump-diffusion stochastic master equation.
Integration is explicit Euler-Maruyama followed by a projection (hermitize,
clip negative eigenvalues, renormalize the trace) so the state invariants are
machine-checkable after every step.  Counting channels are realized by
thinning with the left-limit intensity frozen over the step and at most one
event per channel per step; a step-size guard keeps that approximation at
weak order one.

All map functions accept a batch of states in the leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np

from .errors import ConfigError, IntegrationError
from .model import QndModel, jump_rate_table
from .streams import TrajectoryStream

# Intensity below this floor means "no jump possible", not a division request.
INTENSITY_FLOOR = 1e-14
# Guard: dt times the largest possible counting intensity must not exceed this.
THINNING_GUARD = 0.1
# A block weight this close to one marks the trajectory as resolved.
LIMIT_BLOCK_TOL = 1e-6


# -- state validation ----------------------------------------------------------------


def density_defects(rho: np.ndarray) -> dict[str, float]:
    """Hermiticity, trace and positivity defects of a candidate state."""
    herm = float(np.max(np.abs(rho - rho.conj().T))) if rho.size else 0.0
    trace = abs(float(np.trace(rho).real) - 1.0)
    min_eig = float(np.min(np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))))
    return {"hermiticity": herm, "trace": trace, "min_eig": min_eig}


def check_density(rho: np.ndarray, atol: float = 1e-10) -> None:
    d = density_defects(rho)
    if d["hermiticity"] > atol or d["trace"] > atol or d["min_eig"] < -atol:
        raise ValueError(f"not a density matrix within {atol}: {d}")


def project_density(rho: np.ndarray) -> np.ndarray:
    """Nearest-in-spirit valid state: hermitize, clip eigenvalues at 0, renormalize."""
    sym = 0.5 * (rho + np.swapaxes(rho, -1, -2).conj())
    vals, vecs = np.linalg.eigh(sym)
    vals = np.clip(vals, 0.0, None)
    tr = vals.sum(axis=-1, keepdims=True)
    if np.any(tr <= 0):
        raise IntegrationError("state collapsed to zero trace during projection")
    vals = vals / tr
    return np.einsum("...ik,...k,...jk->...ij", vecs, vals, vecs.conj())


# -- superoperator maps ----------------------------------------------------------------


def _diag_sandwich(x: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """X rho X^dag for diagonal X with entries ``x``."""
    return x[:, None] * rho * x.conj()[None, :]


def _diag_dissipator(x: np.ndarray, rho: np.ndarray) -> np.ndarray:
    mag2 = (x.real**2 + x.imag**2)[None, :]
    return _diag_sandwich(x, rho) - 0.5 * (mag2.T * rho + rho * mag2)


def _full_dissipator(x: np.ndarray, rho: np.ndarray) -> np.ndarray:
    xdx = x.conj().T @ x
    return x @ rho @ x.conj().T - 0.5 * (xdx @ rho + rho @ xdx)


def lindblad_rhs(model: QndModel, rho: np.ndarray) -> np.ndarray:
    """Unconditional drift: commutator plus every dissipation channel.  Trace-free."""
    h = model.hamiltonian
    out = -1j * (h @ rho - rho @ h)
    for k in range(model.n_diffusive):
        if model.gamma[k] != 0.0:
            out = out + model.gamma[k] * _diag_dissipator(model.l_diagonals[k], rho)
    for k in range(model.n_jump):
        if model.iota[k] != 0.0:
            out = out + model.iota[k] * _diag_dissipator(model.c_diagonals[k], rho)
    for a in model.a_full:
        out = out + _full_dissipator(a, rho)
    return out


def homodyne_term(model: QndModel, k: int, rho: np.ndarray) -> np.ndarray:
    """Diffusive innovation gain for channel ``k``.  Trace-free."""
    w = np.sqrt(model.eta[k] * model.gamma[k])
    l = model.l_diagonals[k]
    lr = l[:, None] * rho + rho * l.conj()[None, :]
    tr = np.diagonal(lr, axis1=-2, axis2=-1).sum(axis=-1).real
    return w * (lr - tr[..., None, None] * rho)


def jump_maps(model: QndModel, k: int, rho: np.ndarray):
    """Unnormalized post-jump state J, its trace T, and the centered jump map Q.

    When T is at or below the intensity floor the channel is inactive and Q is
    returned as ``None``; that is a defined state, not an error.
    """
    j = model.theta[k] * rho
    for kbar in range(model.n_jump):
        w = model.zeta[k, kbar] * model.iota[kbar]
        if w != 0.0:
            j = j + w * _diag_sandwich(model.c_diagonals[kbar], rho)
    t = float(np.trace(j).real)
    if t <= INTENSITY_FLOOR:
        return j, t, None
    return j, t, j / t - rho


def _batched_jump_intensities(model: QndModel, rho: np.ndarray) -> np.ndarray:
    """Counting intensities for every channel, shape (..., n_jump)."""
    diag = np.diagonal(rho, axis1=-2, axis2=-1).real
    out = np.empty(rho.shape[:-2] + (model.n_jump,))
    mag2 = np.abs(model.c_diagonals) ** 2  # (n_jump, dim)
    weights = model.zeta * model.iota[None, :]  # (k, kbar)
    site_rates = weights @ mag2  # (k, dim)
    for k in range(model.n_jump):
        out[..., k] = model.theta[k] + diag @ site_rates[k]
    return out


def em_step(
    model: QndModel,
    rho: np.ndarray,
    dW: np.ndarray,
    jump_flags: np.ndarray,
    dt: float,
) -> np.ndarray:
    """One Euler-Maruyama update followed by the state projection.

    ``dW`` are Wiener increments (variance dt) and ``jump_flags`` are 0/1 per
    counting channel.  Accepts batched states with matching batched noise.
    """
    dW = np.asarray(dW, dtype=float)
    jump_flags = np.asarray(jump_flags)
    out = rho + lindblad_rhs(model, rho) * dt
    for k in range(model.n_diffusive):
        out = out + homodyne_term(model, k, rho) * dW[..., k, None, None]
    if model.n_jump:
        intensities = _batched_jump_intensities(model, rho)
        for k in range(model.n_jump):
            t_k = intensities[..., k]
            j = model.theta[k] * rho
            for kbar in range(model.n_jump):
                w = model.zeta[k, kbar] * model.iota[kbar]
                if w != 0.0:
                    j = j + w * _diag_sandwich(model.c_diagonals[kbar], rho)
            active = t_k > INTENSITY_FLOOR
            safe_t = np.where(active, t_k, 1.0)
            q_map = j / safe_t[..., None, None] - rho
            q_map = np.where(active[..., None, None], q_map, 0.0)
            out = out + q_map * (jump_flags[..., k, None, None] - t_k[..., None, None] * dt)
    if not np.all(np.isfinite(out)):
        raise IntegrationError("non-finite state after Euler-Maruyama update")
    return project_density(out)


# -- trajectory containers ---------------------------------------------------------------


@dataclass(frozen=True)
class MeasurementRecord:
    """Discrete measurement record of one trajectory."""

    dt: float
    steps: int
    dY: np.ndarray  # (steps, n_diffusive)
    dN: np.ndarray  # (steps, n_jump), entries in {0, 1}
    seed: int
    traj: int = 0

    def __post_init__(self):
        if self.dY.shape[0] != self.steps or self.dN.shape[0] != self.steps:
            raise ValueError("record row count must equal steps")


@dataclass(frozen=True)
class TrajectoryOutput:
    record: MeasurementRecord
    times: np.ndarray  # checkpoint times
    q_path: np.ndarray  # (len(times), n_blocks)
    rho_path: tuple[np.ndarray, ...] | None
    limit_block: int | None


def _resolve_steps(horizon: float, dt: float) -> int:
    if dt <= 0 or horizon <= 0:
        raise ConfigError("horizon and dt must be positive")
    steps = int(round(horizon / dt))
    if steps < 1 or abs(steps * dt - horizon) > 1e-9 * max(1.0, horizon):
        raise ConfigError(f"horizon {horizon} is not an integer number of dt={dt} steps")
    return steps


def thinning_guard_ok(model: QndModel, dt: float) -> float:
    """Validate dt against the largest possible counting intensity; returns that bound."""
    rates = jump_rate_table(model)
    sup = float(rates.max()) if rates.size else 0.0
    if dt * sup > THINNING_GUARD:
        raise ConfigError(
            f"dt={dt} violates the jump thinning guard: dt * sup intensity = {dt * sup:.3g} > {THINNING_GUARD}"
        )
    return sup


def _checkpoint_steps(checkpoints: Sequence[float], dt: float, steps: int) -> np.ndarray:
    idx = np.round(np.asarray(list(checkpoints), dtype=float) / dt).astype(int)
    if np.any(idx < 0) or np.any(idx > steps):
        raise ConfigError("checkpoints must lie inside [0, horizon]")
    return idx


def simulate(
    model: QndModel,
    rho0: np.ndarray,
    horizon: float,
    dt: float,
    seed: int,
    checkpoints: Sequence[float] = (),
    traj: int = 0,
    round_index: int = 0,
    keep_rho: bool = False,
) -> TrajectoryOutput:
    """Integrate one trajectory and return its record and sampled block weights.

    Deterministic in (model, rho0, horizon, dt, seed, traj, round_index): noise
    comes from the trajectory's own counter-based stream.
    """
    steps = _resolve_steps(horizon, dt)
    thinning_guard_ok(model, dt)
    check_density(rho0)

    nd, nj = model.n_diffusive, model.n_jump
    cp_steps = _checkpoint_steps(checkpoints, dt, steps)
    cp_set = set(cp_steps.tolist())
    stream = TrajectoryStream(seed, traj, round_index)
    normals, uniforms = stream.step_noise(steps, nd, nj)

    sqrt_dt = np.sqrt(dt)
    drift_weight = 2.0 * np.sqrt(model.eta * model.gamma)  # record drift coefficient per channel
    re_l = model.l_coeffs.real

    rho = np.array(rho0, dtype=complex)
    dY = np.zeros((steps, nd))
    dN = np.zeros((steps, nj), dtype=np.int8)
    q_rows = {}
    rho_rows = {}

    def snapshot(step_idx):
        if step_idx in cp_set:
            q_rows[step_idx] = model.blocks.block_weights(rho)
            if keep_rho:
                rho_rows[step_idx] = rho.copy()

    snapshot(0)
    for s in range(steps):
        q = model.blocks.block_weights(rho)
        dw = normals[s] * sqrt_dt
        if nj:
            intensities = _batched_jump_intensities(model, rho)
            flags = (uniforms[s] < np.minimum(intensities * dt, 1.0)).astype(np.int8)
        else:
            flags = np.zeros(0, dtype=np.int8)
        dY[s] = dw + drift_weight * (re_l @ q) * dt
        dN[s] = flags
        try:
            rho = em_step(model, rho, dw, flags, dt)
        except IntegrationError as exc:
            raise IntegrationError(str(exc), step=s) from None
        snapshot(s + 1)

    q_final = model.blocks.block_weights(rho)
    limit = int(np.argmax(q_final)) if q_final.max() > 1.0 - LIMIT_BLOCK_TOL else None
    record = MeasurementRecord(dt=dt, steps=steps, dY=dY, dN=dN, seed=seed, traj=traj)
    times = cp_steps * dt
    q_path = np.array([q_rows[i] for i in cp_steps]) if len(cp_steps) else np.zeros((0, model.blocks.n_blocks))
    rho_path = tuple(rho_rows[i] for i in cp_steps) if keep_rho else None
    return TrajectoryOutput(record=record, times=times, q_path=q_path, rho_path=rho_path, limit_block=limit)


@dataclass(frozen=True)
class EnsembleOutput:
    times: np.ndarray
    q_paths: np.ndarray  # (n_traj, len(times), n_blocks)
    limit_blocks: np.ndarray  # (n_traj,), -1 when unresolved
    final_weights: np.ndarray  # (n_traj, n_blocks)


def simulate_ensemble(
    model: QndModel,
    rho0: np.ndarray,
    horizon: float,
    dt: float,
    seed: int,
    n_traj: int,
    checkpoints: Sequence[float] = (),
    round_index: int = 0,
    chunk_steps: int = 2048,
) -> EnsembleOutput:
    """Batch-integrate many trajectories of the full state at once.

    Statistically identical to calling :func:`simulate` per trajectory (same
    per-trajectory streams), but runs the time loop over an (n_traj, d, d)
    stack, which is what the ensemble acceptance checks need.
    """
    steps = _resolve_steps(horizon, dt)
    thinning_guard_ok(model, dt)
    check_density(rho0)

    nd, nj = model.n_diffusive, model.n_jump
    cp_steps = set(_checkpoint_steps(checkpoints, dt, steps).tolist())
    streams = [TrajectoryStream(seed, t, round_index) for t in range(n_traj)]

    rho = np.broadcast_to(np.asarray(rho0, dtype=complex), (n_traj, model.dim, model.dim)).copy()
    sqrt_dt = np.sqrt(dt)
    times, q_rows = [], []

    def snapshot(step_idx):
        if step_idx in cp_steps:
            times.append(step_idx * dt)
            q_rows.append(model.blocks.block_weights(rho))

    snapshot(0)
    done = 0
    while done < steps:
        block = min(chunk_steps, steps - done)
        normals = np.empty((n_traj, block, nd))
        uniforms = np.empty((n_traj, block, nj))
        for t, stream in enumerate(streams):
            z, u = stream.step_noise(block, nd, nj)
            normals[t] = z
            uniforms[t] = u
        for s in range(block):
            dw = normals[:, s] * sqrt_dt
            if nj:
                intensities = _batched_jump_intensities(model, rho)
                flags = (uniforms[:, s] < np.minimum(intensities * dt, 1.0)).astype(np.int8)
            else:
                flags = np.zeros((n_traj, 0), dtype=np.int8)
            rho = em_step(model, rho, dw, flags, dt)
            snapshot(done + s + 1)
        done += block

    q_final = model.blocks.block_weights(rho)
    resolved = q_final.max(axis=-1) > 1.0 - LIMIT_BLOCK_TOL
    limits = np.where(resolved, np.argmax(q_final, axis=-1), -1)
    return EnsembleOutput(
        times=np.asarray(times),
        q_paths=np.stack(q_rows, axis=1) if q_rows else np.zeros((n_traj, 0, model.blocks.n_blocks)),
        limit_blocks=limits,
        final_weights=q_final,
    )


# -- infinitesimal generator ------------------------------------------------------------


class StateFunction(Protocol):
    """Twice-differentiable scalar function of the state."""

    def value(self, rho: np.ndarray) -> float: ...

    def gradient(self, rho: np.ndarray) -> np.ndarray:
        """Hermitian matrix G with d/ds V(rho + s X) = Re Tr(G X)."""
        ...

    def hessian(self, rho: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
        """Symmetric second directional derivative along Hermitian x, y."""
        ...


def generator_apply(model: QndModel, func: StateFunction, rho: np.ndarray) -> float:
    """Generator of the conditional dynamics applied to ``func`` at ``rho``.

    Assembles drift pairing, half the sum of second-order diffusive forms, and
    the jump compensation terms.  A counting channel whose intensity is at the
    floor contributes nothing.
    """
    grad = func.gradient(rho)
    out = float(np.trace(grad @ lindblad_rhs(model, rho)).real)
    for k in range(model.n_diffusive):
        g = homodyne_term(model, k, rho)
        out += 0.5 * func.hessian(rho, g, g)
    for k in range(model.n_jump):
        j, t, q_map = jump_maps(model, k, rho)
        if q_map is None:
            continue
        out += (func.value(j / t) - func.value(rho) - float(np.trace(grad @ q_map).real)) * t
    return out


@dataclass(frozen=True)
class BlockWeightSum(StateFunction):
    """V(rho) = sum_j coeffs_j Tr(P_j rho); linear, so the Hessian vanishes."""

    model: QndModel
    coeffs: np.ndarray

    def value(self, rho):
        return float(self.model.blocks.block_weights(rho) @ self.coeffs)

    def gradient(self, rho):
        return np.diag(self.model.blocks.expand(self.coeffs)).astype(complex)

    def hessian(self, rho, x, y):
        return 0.0


def block_weight_function(model: QndModel, j: int) -> BlockWeightSum:
    coeffs = np.zeros(model.blocks.n_blocks)
    coeffs[j] = 1.0
    return BlockWeightSum(model, coeffs)


@dataclass(frozen=True)
class SimplexLift(StateFunction):
    """Lift of a function of the block weights to a function of the state.

    ``v``, ``dv`` and ``d2v`` act on the weight vector q; the chain rule
    through the linear map rho -> q is exact.
    """

    model: QndModel
    v: Callable[[np.ndarray], float]
    dv: Callable[[np.ndarray], np.ndarray]
    d2v: Callable[[np.ndarray], np.ndarray]

    def value(self, rho):
        return float(self.v(self.model.blocks.block_weights(rho)))

    def gradient(self, rho):
        q = self.model.blocks.block_weights(rho)
        return np.diag(self.model.blocks.expand(self.dv(q))).astype(complex)

    def hessian(self, rho, x, y):
        q = self.model.blocks.block_weights(rho)
        wx = self.model.blocks.block_weights(x)
        wy = self.model.blocks.block_weights(y)
        return float(wx @ self.d2v(q) @ wy)


def coherence_lyapunov(model: QndModel) -> SimplexLift:
    """V = sum over ordered pairs i != j of sqrt(q_i q_j).

    Vanishes exactly on the single-block states; requires strictly positive
    weights on the support face it is evaluated on.
    """

    def v(q):
        root = np.sqrt(q)
        s = root.sum()
        return float(s * s - q.sum())  # sum_{i != j} sqrt(q_i q_j)

    def dv(q):
        root = np.sqrt(q)
        return (root.sum() - root) / root

    def d2v(q):
        root = np.sqrt(q)
        out = 1.0 / (2.0 * np.outer(root, root))
        diag = -(root.sum() - root) / (2.0 * root**3)
        np.fill_diagonal(out, diag)
        return out

    return SimplexLift(model, v, dv, d2v)
