"""Mismatch rate functionals and the stability conditions built from them.

For a filter run with wrong parameters, the log-ratio of a wrong block weight
to the realized one drifts at minus the sum of a diffusive gap and a counting
gap.  These gaps are exact closed forms in the true and estimated parameters;
in the perfectly calibrated case both collapse to nonnegative Fisher-type
quantities.  The banked (four-index) variants govern candidate selection.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import QndModel, jump_rate_table
from .reduced import FilterParams, filter_jump_rates


def mismatch_rates(model: QndModel, params: FilterParams) -> tuple[np.ndarray, np.ndarray]:
    """Per-(channel, i, j) diffusive and counting gaps for a single filter.

    Diffusive entries use the form that stays finite when the candidate
    coupling vanishes; counting entries require every candidate rate positive.
    """
    nb = model.blocks.n_blocks
    re_l = model.l_coeffs.real
    s_true = np.sqrt(model.eta * model.gamma)
    s_hat = np.sqrt(params.eta * params.gamma)

    phi = np.zeros((model.n_diffusive, nb, nb))
    for k in range(model.n_diffusive):
        li = re_l[k][:, None]
        lj = re_l[k][None, :]
        d = s_hat[k] * (li - lj)
        phi[k] = 2.0 * (d**2 + 2.0 * d * lj * (s_hat[k] - s_true[k]))

    g_true = jump_rate_table(model)
    g_hat = filter_jump_rates(model, params)
    if g_hat.size and np.any(g_hat <= 0.0):
        raise ValueError("candidate jump rates must be strictly positive (log undefined)")
    psi = np.zeros((model.n_jump, nb, nb))
    for k in range(model.n_jump):
        gi = g_hat[k][:, None]
        gj = g_hat[k][None, :]
        log_ratio = np.log(gi) - np.log(gj)
        psi[k] = log_ratio * (gj - g_true[k][None, :]) - gj * (1.0 - gi / gj + log_ratio)
    return phi, psi


def pairwise_stability_ok(phi: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """Boolean (i, j) table: total gap strictly positive for every ordered pair i != j."""
    nb = phi.shape[1] if phi.size else psi.shape[1]
    total = np.zeros((nb, nb))
    if phi.size:
        total += phi.sum(axis=0)
    if psi.size:
        total += psi.sum(axis=0)
    ok = total > 0.0
    np.fill_diagonal(ok, True)
    return ok


@dataclass(frozen=True)
class MismatchReport:
    """Filter-stability audit for one candidate parameter set."""

    diffusive_gap: np.ndarray
    counting_gap: np.ndarray
    stable_pairs: np.ndarray

    @property
    def stable(self) -> bool:
        return bool(np.all(self.stable_pairs))


def mismatch_report(model: QndModel, params: FilterParams) -> MismatchReport:
    phi, psi = mismatch_rates(model, params)
    return MismatchReport(diffusive_gap=phi, counting_gap=psi, stable_pairs=pairwise_stability_ok(phi, psi))


# -- banked variants ---------------------------------------------------------------------


def bank_mismatch_rates(
    model: QndModel, bank: Sequence[FilterParams]
) -> tuple[np.ndarray, np.ndarray]:
    """Candidate-resolved gaps.

    Returns ``(diffusive, counting)`` with shapes
    (n_diffusive, n_cand, n_blocks, n_cand, n_blocks) and the counting
    analogue: entry [k, m, i, n, j] is the drift gap of candidate m's weight on
    block i measured against candidate n's weight on block j when the record
    is generated by the true parameters concentrated on block j.
    """
    nb = model.blocks.n_blocks
    nc = len(bank)
    re_l = model.l_coeffs.real
    s_true = np.sqrt(model.eta * model.gamma)
    s_hat = np.stack([np.sqrt(p.eta * p.gamma) for p in bank], axis=1)  # (n_diffusive, n_cand)

    phi = np.zeros((model.n_diffusive, nc, nb, nc, nb))
    for k in range(model.n_diffusive):
        smi = s_hat[k][:, None, None, None] * re_l[k][None, :, None, None]  # (m, i, 1, 1)
        snj = s_hat[k][None, None, :, None] * re_l[k][None, None, None, :]  # (1, 1, n, j)
        d = smi - snj
        lj = re_l[k][None, None, None, :]
        sn = s_hat[k][None, None, :, None]
        phi[k] = 2.0 * (d**2 + 2.0 * d * lj * (sn - s_true[k]))

    g_true = jump_rate_table(model)
    g_hat = np.stack([filter_jump_rates(model, p) for p in bank], axis=1)  # (n_jump, n_cand, nb)
    if g_hat.size and np.any(g_hat <= 0.0):
        raise ValueError("candidate jump rates must be strictly positive (log undefined)")
    psi = np.zeros((model.n_jump, nc, nb, nc, nb))
    for k in range(model.n_jump):
        gmi = g_hat[k][:, :, None, None]
        gnj = g_hat[k][None, None, :, :]
        log_ratio = np.log(gmi) - np.log(gnj)
        gj = g_true[k][None, None, None, :]
        psi[k] = log_ratio * (gnj - gj) - gnj * (1.0 - gmi / gnj + log_ratio)
    return phi, psi


@dataclass(frozen=True)
class BankStabilityCheck:
    """Sign audit of the selection condition for one hypothesized true cell."""

    ok: bool
    margin: float  # smallest total gap over competing (candidate, block) tuples
    worst: tuple[int, int, int]  # (m, i, j) achieving the margin


def bank_stability_check(phi_bar: np.ndarray, psi_bar: np.ndarray, nstar: int) -> BankStabilityCheck:
    """Strict sign test: every competing tuple must have positive total gap.

    Competing tuples are all (m, i) different from (nstar, j); the check is
    exact (tolerance zero).
    """
    total = _total_gap(phi_bar, psi_bar)  # (m, i, n, j)
    nc, nb = total.shape[0], total.shape[1]
    margin = np.inf
    worst = (-1, -1, -1)
    for m in range(nc):
        for i in range(nb):
            for j in range(nb):
                if m == nstar and i == j:
                    continue
                g = total[m, i, nstar, j]
                if g < margin:
                    margin = g
                    worst = (m, i, j)
    return BankStabilityCheck(ok=bool(margin > 0.0), margin=float(margin), worst=worst)


def _total_gap(phi_bar: np.ndarray, psi_bar: np.ndarray) -> np.ndarray:
    parts = []
    if phi_bar.size:
        parts.append(phi_bar.sum(axis=0))
    if psi_bar.size:
        parts.append(psi_bar.sum(axis=0))
    if not parts:
        raise ValueError("no measurement channels")
    return sum(parts)


def predicted_selection_rate(phi_bar: np.ndarray, psi_bar: np.ndarray, n: int, nstar: int) -> float:
    """Asymptotic slope bound of log(pi_n / pi_nstar): worst total gap, negated."""
    total = _total_gap(phi_bar, psi_bar)
    return float(-total[n, :, nstar, :].min())


def worst_selection_rate(phi_bar: np.ndarray, psi_bar: np.ndarray, nstar: int | None = None) -> float:
    """Slowest predicted selection rate magnitude over competing candidates.

    With ``nstar`` given, minimizes |rate| over n != nstar; otherwise over all
    ordered candidate pairs (the truth-unknown horizon rule).
    """
    nc = phi_bar.shape[1] if phi_bar.size else psi_bar.shape[1]
    targets = [nstar] if nstar is not None else list(range(nc))
    best = np.inf
    for ns in targets:
        for n in range(nc):
            if n == ns:
                continue
            best = min(best, abs(predicted_selection_rate(phi_bar, psi_bar, n, ns)))
    return float(best)
