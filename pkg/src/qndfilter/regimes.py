"""Binding of an estimated scalar to concrete model and filter parameters.

Each regime estimates one scalar: the diffusive coupling scale of a channel,
a lone counting channel's detection product, or one cross-talk-weighted
counting product among several channels.  The binding knows how to build the
data-generating model for a hypothetical true value and how to build a
candidate filter holding everything else at its known value.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError
from .griddesign import DIFFUSIVE, JUMP_MULTI, JUMP_SINGLE, GridDesign, ConditionCheck
from .model import QndModel
from .rates import bank_mismatch_rates, bank_stability_check
from .reduced import FilterParams


@dataclass(frozen=True)
class ParameterBinding:
    """Which scalar a campaign estimates and where it lives in the parameter set."""

    regime: str
    channel: int = 0
    source_channel: int = -1

    def __post_init__(self):
        if self.regime not in (DIFFUSIVE, JUMP_SINGLE, JUMP_MULTI):
            raise ConfigError(f"unknown regime {self.regime!r}")
        if self.regime == JUMP_MULTI and self.source_channel < 0:
            raise ConfigError("multi-channel binding needs a source channel")

    @classmethod
    def for_grid(cls, grid: GridDesign) -> "ParameterBinding":
        return cls(regime=grid.regime, channel=grid.channel, source_channel=grid.source_channel)

    def true_value(self, model: QndModel) -> float:
        """The bound scalar's value in a given model."""
        k = self.channel
        if self.regime == DIFFUSIVE:
            return float(np.sqrt(model.eta[k] * model.gamma[k]))
        if self.regime == JUMP_SINGLE:
            return float(model.zeta[k, k] * model.iota[k])
        return float(model.zeta[k, self.source_channel] * model.iota[self.source_channel])

    def apply_true(self, model: QndModel, lam: float) -> QndModel:
        """Data-generating model with the bound scalar set to ``lam``."""
        if lam <= 0.0:
            raise ConfigError("true parameter must be positive")
        k = self.channel
        if self.regime == DIFFUSIVE:
            if model.eta[k] <= 0.0:
                raise ConfigError("diffusive binding needs a positive efficiency to carry the scale")
            gamma = model.gamma.copy()
            gamma[k] = lam * lam / model.eta[k]
            return replace(model, gamma=gamma)
        if self.regime == JUMP_SINGLE:
            if model.zeta[k, k] <= 0.0:
                raise ConfigError("single-channel binding needs a positive diagonal cross-talk entry")
            iota = model.iota.copy()
            iota[k] = lam / model.zeta[k, k]
            return replace(model, iota=iota)
        kbar = self.source_channel
        if model.iota[kbar] <= 0.0:
            raise ConfigError("multi-channel binding needs a positive source coupling")
        zeta = model.zeta.copy()
        zeta[k, kbar] = lam / model.iota[kbar]
        return replace(model, zeta=zeta)

    def candidate(self, model: QndModel, lam_hat: float) -> FilterParams:
        """Filter parameters: everything known except the bound scalar at ``lam_hat``."""
        params = FilterParams.from_model(model)
        k = self.channel
        if self.regime == DIFFUSIVE:
            gamma = params.gamma.copy()
            gamma[k] = lam_hat * lam_hat / model.eta[k]
            return params.with_values(gamma=gamma)
        if self.regime == JUMP_SINGLE:
            iota = params.iota.copy()
            iota[k] = lam_hat / model.zeta[k, k]
            return params.with_values(iota=iota)
        zeta = params.zeta.copy()
        zeta[k, self.source_channel] = lam_hat / model.iota[self.source_channel]
        return params.with_values(zeta=zeta)

    def bank(self, model: QndModel, grid: GridDesign) -> list[FilterParams]:
        return [self.candidate(model, lam) for lam in grid.lambdas]


def scan_selection_condition(
    model: QndModel,
    grid: GridDesign,
    n_samples: int = 101,
) -> ConditionCheck:
    """Exhaustive numeric re-verification of a grid's selection condition.

    For every cell, the true parameter sweeps the cell on ``n_samples``
    points and the exact candidate-resolved gap tensors must be strictly
    positive on all competing tuples.  Open-cell regimes sample the interior
    strictly and check the endpoints non-strictly (the boundary is precisely
    the oscillatory case); the gapped multi regime has closed cells, checked
    strictly throughout.
    """
    binding = ParameterBinding.for_grid(grid)
    closed = grid.regime == JUMP_MULTI
    worst = np.inf
    worst_at = ""
    ok = True
    bank = binding.bank(model, grid)
    for nstar in range(grid.n_cells):
        interior = np.linspace(grid.a, grid.b, n_samples + 2)[1:-1]
        points = [(float(k), True) for k in interior]
        if closed:
            points += [(grid.a, True), (grid.b, True)]
        else:
            points += [(grid.a, False), (grid.b, False)]
        for kappa, strict in points:
            lam = kappa * grid.lambdas[nstar]
            true_model = binding.apply_true(model, lam)
            phi_bar, psi_bar = bank_mismatch_rates(true_model, bank)
            chk = bank_stability_check(phi_bar, psi_bar, nstar)
            bad = (not chk.ok) if strict else (chk.margin < -1e-12)
            if chk.margin < worst:
                worst = chk.margin
                worst_at = f"cell {nstar}, kappa {kappa:.6g}, tuple {chk.worst}"
            if bad:
                ok = False
    return ConditionCheck("selection_condition_scan", ok, float(worst), worst_at)


def verify_grid(model: QndModel, grid: GridDesign, n_samples: int = 101) -> GridDesign:
    """Return the grid with the selection-condition scan appended to its report."""
    scan = scan_selection_condition(model, grid, n_samples)
    return grid.with_checks(list(grid.checks) + [scan])
