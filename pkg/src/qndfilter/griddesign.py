"""Construction of certified candidate grids for the three estimation regimes.

A grid is a geometric ladder of candidate values whose cells tile the prior
bracket.  The cell shape (a, b, epsilon) must satisfy regime-specific
inequalities guaranteeing that, wherever the truth falls, every competing
(candidate, block) weight decays; those inequalities are closed forms in the
block measurement coefficients, so feasibility is a deterministic scan, not a
randomized search.  Scan resolution: 1e-2 on each shape parameter, refined
twice by a factor of ten around the best feasible point.  Near-degenerate
ratio collisions (within 1e-9 of one) are treated as infeasible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import InfeasibleDesignError
from .model import QndModel

BRANCH_POINT = math.exp(-1.0)  # -1/e is the edge of the real domain
RATIO_EXCLUSION = 1e-9
EPSILON_LIMIT = (math.sqrt(13.0) - 1.0) / 2.0  # supremum of admissible gap factors

DIFFUSIVE = "diffusive"
JUMP_SINGLE = "jump_single"
JUMP_MULTI = "jump_multi"
REGIMES = (DIFFUSIVE, JUMP_SINGLE, JUMP_MULTI)


def lambert_w0(x: float) -> float:
    """Principal branch of w * exp(w) = x via Halley iteration.

    Initial guess: the branch-point expansion ``-1 + sqrt(2(1 + e*x))`` for
    x < -0.25, x itself on [-0.25, e), and ``log x - log log x`` beyond.
    Converges to relative residual 1e-13.
    """
    x = float(x)
    if x < -BRANCH_POINT - 1e-15:
        raise ValueError(f"lambert_w0 domain is [-1/e, inf), got {x}")
    p2 = 2.0 * (1.0 + math.e * x)
    if p2 <= 0.0:
        return -1.0
    if x < -0.25:
        p = math.sqrt(p2)
        w = -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p2 * p / (2.0 * math.sqrt(2.0))
    elif x < math.e:
        w = x
    else:
        lx = math.log(x)
        w = lx - math.log(lx)

    target = 1e-13 * max(abs(x), 1e-290)
    for _ in range(60):
        ew = math.exp(w)
        f = w * ew - x
        if abs(f) <= target:
            return w
        wp1 = w + 1.0
        denom = ew * wp1 - (w + 2.0) * f / (2.0 * wp1)
        if denom == 0.0:
            break
        w -= f / denom
    ew = math.exp(w)
    if abs(w * ew - x) > 1e-11 * max(abs(x), 1e-290):
        raise ArithmeticError(f"lambert_w0 failed to converge at x={x}")
    return w


def jump_cell_upper(a: float) -> float:
    """The b > 1 paired with a by the jump cell equation a - b + a b log(b/a) = 0."""
    if not 0.0 < a < 1.0:
        raise ValueError("a must lie in (0, 1)")
    w = lambert_w0(-math.exp(-1.0 / a) / a)
    return -1.0 / w


@dataclass(frozen=True)
class ConditionCheck:
    name: str
    ok: bool
    value: float
    detail: str = ""


@dataclass(frozen=True)
class GridDesign:
    """Candidate ladder with certified cell shape.

    Cells are ``(a * lam_n, b * lam_n)`` around each candidate ``lam_n`` with
    consecutive ratio ``epsilon * b / a`` (epsilon is 1 outside the
    multi-channel jump regime, where it opens gaps between cells).
    """

    regime: str
    a: float
    b: float
    epsilon: float
    lambdas: tuple[float, ...]
    lambda_lo: float
    lambda_hi: float
    accuracy: tuple[float, float]
    channel: int = 0
    source_channel: int = -1
    checks: tuple[ConditionCheck, ...] = ()

    @property
    def n_cells(self) -> int:
        return len(self.lambdas)

    @property
    def step_ratio(self) -> float:
        return self.epsilon * self.b / self.a

    def cell(self, n: int) -> tuple[float, float]:
        return self.a * self.lambdas[n], self.b * self.lambdas[n]

    def cell_of(self, lam: float) -> int | None:
        """Index of the cell whose open interior contains ``lam``."""
        for n in range(self.n_cells):
            lo, hi = self.cell(n)
            if lo < lam < hi:
                return n
        return None

    def with_checks(self, checks: Sequence[ConditionCheck]) -> "GridDesign":
        return replace(self, checks=tuple(checks))

    @property
    def all_ok(self) -> bool:
        return all(c.ok for c in self.checks)


def _cell_count(lambda_lo: float, lambda_hi: float, step_ratio: float) -> int:
    r = math.log(lambda_hi / lambda_lo) / math.log(step_ratio)
    n = max(1, math.ceil(r - 1e-9))
    if step_ratio**n < (lambda_hi / lambda_lo) * (1.0 - 1e-12):
        n += 1
    return n


def _ladder(lambda_lo: float, a: float, step_ratio: float, n: int) -> tuple[float, ...]:
    first = lambda_lo / a
    return tuple(first * step_ratio**k for k in range(n))


def _scan_levels(lo: float, hi: float, feasible, objective):
    """Deterministic coarse-to-fine maximization of ``objective`` over feasible points.

    Initial resolution 1e-2, refined twice by a factor of ten around the best
    point; ties resolve to the smallest coordinate.  Returns (best, tallies)
    where tallies count which constraint bound each rejected point.
    """
    tallies: dict[str, int] = {}
    best = None
    best_obj = -np.inf
    step = 1e-2
    lo_cur, hi_cur = lo, hi
    for _level in range(3):
        n_pts = max(2, int(round((hi_cur - lo_cur) / step)) + 1)
        for x in np.linspace(lo_cur, hi_cur, n_pts):
            verdict = feasible(float(x))
            if verdict is None:
                obj = objective(float(x))
                if obj > best_obj + 1e-12:
                    best_obj = obj
                    best = float(x)
            else:
                tallies[verdict] = tallies.get(verdict, 0) + 1
        if best is None:
            return None, tallies
        lo_cur = max(lo, best - step)
        hi_cur = min(hi, best + step)
        step /= 10.0
    return best, tallies


def _binding(tallies: dict[str, int]) -> str:
    if not tallies:
        return "empty search range"
    return max(tallies.items(), key=lambda kv: kv[1])[0]


# -- diffusive regime ----------------------------------------------------------------------


def _diffusive_ratios(model: QndModel, channel: int) -> np.ndarray:
    re_l = model.l_coeffs.real[channel]
    if np.any(re_l == 0.0):
        raise InfeasibleDesignError(
            "diffusive design needs a nonzero real part on every block", binding="re_l_zero"
        )
    if len(set(re_l.tolist())) != len(re_l):
        raise InfeasibleDesignError(
            "diffusive design needs pairwise distinct real parts", binding="re_l_collision"
        )
    return re_l


def _diffusive_feasibility(re_l, a, lambda_lo, lambda_hi, abar, bbar):
    """Returns None when feasible, else the name of the binding constraint."""
    if not a > 0.5:
        return "a_above_half"
    if a < abar:
        return "accuracy_lower"
    b = a / (2.0 * a - 1.0)
    if b > bbar:
        return "accuracy_upper"
    if not a < 1.0 < b:
        return "cell_orientation"
    n = _cell_count(lambda_lo, lambda_hi, b / a)
    x = 2.0 * a - 1.0
    nb = len(re_l)
    over_one, under_one = [], []
    for d in range(-(n - 1), n):
        xd = x**d
        for i in range(nb):
            for j in range(nb):
                if i == j and d == 0:
                    continue
                f = (re_l[i] / re_l[j]) * xd
                if abs(f - 1.0) <= RATIO_EXCLUSION:
                    return "ratio_exclusion"
                if i != j:
                    if f > 1.0:
                        over_one.append(f)
                    elif 0.0 < f < 1.0:
                        under_one.append(f)
    if over_one and not (b - 0.5 * (1.0 + min(over_one)) < 0.0):
        return "upper_margin"
    if under_one and not (a - 0.5 * (1.0 + max(under_one)) > 0.0):
        return "lower_margin"
    return None


def design_diffusive(
    model: QndModel,
    lambda_lo: float,
    lambda_hi: float,
    accuracy_lo: float,
    accuracy_hi: float,
    channel: int = 0,
) -> GridDesign:
    """Grid for estimating the diffusive coupling scale of one channel.

    The cell shape is pinned to b = a / (2a - 1); the scan minimizes a (which
    maximizes the cell ratio, hence fewest candidates) subject to the accuracy
    bracket and the ratio-sign conditions.
    """
    _validate_bracket(lambda_lo, lambda_hi, accuracy_lo, accuracy_hi)
    re_l = _diffusive_ratios(model, channel)

    def feasible(a):
        return _diffusive_feasibility(re_l, a, lambda_lo, lambda_hi, accuracy_lo, accuracy_hi)

    # cell ratio b/a = 1/(2a-1) grows as a shrinks
    best, tallies = _scan_levels(max(accuracy_lo, 0.5 + 1e-6), 1.0 - 1e-6, feasible, lambda a: 1.0 / (2.0 * a - 1.0))
    if best is None:
        raise InfeasibleDesignError(
            f"no admissible diffusive cell shape; binding constraint: {_binding(tallies)}",
            binding=_binding(tallies),
        )
    a = best
    b = a / (2.0 * a - 1.0)
    n = _cell_count(lambda_lo, lambda_hi, b / a)
    lambdas = _ladder(lambda_lo, a, b / a, n)
    checks = [
        ConditionCheck("cell_shape_identity", abs(b / a + 1.0 - 2.0 * b) < 1e-12, b / a + 1.0 - 2.0 * b),
        ConditionCheck("accuracy_bracket", accuracy_lo <= a < 1.0 < b <= accuracy_hi, a),
        ConditionCheck("covers_bracket", lambdas[0] * a <= lambda_lo and lambda_hi <= lambdas[-1] * b, lambdas[-1] * b),
    ]
    return GridDesign(
        regime=DIFFUSIVE,
        a=a,
        b=b,
        epsilon=1.0,
        lambdas=lambdas,
        lambda_lo=lambda_lo,
        lambda_hi=lambda_hi,
        accuracy=(accuracy_lo, accuracy_hi),
        channel=channel,
        checks=tuple(checks),
    )


# -- single-channel jump regime ---------------------------------------------------------------


def single_jump_ratio(c_mag2: np.ndarray, step_ratio: float, m: int, i: int, n: int, j: int) -> float:
    """Intensity ratio of candidate m on block i to candidate n on block j (no shot noise)."""
    return (c_mag2[i] / c_mag2[j]) * step_ratio ** (m - n)


def _chord_slope(g: float) -> float:
    """(g - 1) / log g, the kappa threshold where the counting gap changes sign."""
    return (g - 1.0) / math.log(g)


def _jump_single_feasibility(c_mag2, a, lambda_lo, lambda_hi, abar, bbar):
    if a < abar:
        return "accuracy_lower", None
    b = jump_cell_upper(a)
    if b > bbar:
        return "accuracy_upper", None
    if abs(a - b + a * b * math.log(b / a)) > 1e-12:
        return "cell_equation_residual", None
    y = b / a
    n = _cell_count(lambda_lo, lambda_hi, y)
    nb = len(c_mag2)
    over_one, under_one = [], []
    for d in range(-(n - 1), n):
        yd = y**d
        for i in range(nb):
            for j in range(nb):
                if i == j and d == 0:
                    continue
                g = (c_mag2[i] / c_mag2[j]) * yd
                if abs(g - 1.0) <= RATIO_EXCLUSION:
                    return "ratio_exclusion", None
                if i != j:
                    if g > 1.0:
                        over_one.append(g)
                    else:
                        under_one.append(g)
    if over_one and not (min(_chord_slope(g) for g in over_one) - b > 0.0):
        return "upper_margin", None
    if under_one and not (a - max(_chord_slope(g) for g in under_one) > 0.0):
        return "lower_margin", None
    return None, b


def design_jump_single(
    model: QndModel,
    lambda_lo: float,
    lambda_hi: float,
    accuracy_lo: float,
    accuracy_hi: float,
    channel: int = 0,
) -> GridDesign:
    """Grid for the product of detection probability and coupling of a lone counting channel.

    Requires exactly one counting channel with zero dark-count rate; the upper
    cell edge solves the transcendental cell equation through the Lambert
    function, so both one-step ratio conditions bind simultaneously.
    """
    _validate_bracket(lambda_lo, lambda_hi, accuracy_lo, accuracy_hi)
    if model.n_jump != 1:
        raise InfeasibleDesignError("single-channel jump design needs exactly one counting channel", binding="n_jump")
    if model.theta[channel] != 0.0:
        raise InfeasibleDesignError("single-channel jump design requires zero dark-count rate", binding="theta_zero")
    c_mag2 = np.abs(model.c_coeffs[channel]) ** 2
    if np.any(c_mag2 == 0.0):
        raise InfeasibleDesignError("every block needs a nonzero counting coefficient", binding="c_zero")

    def feasible(a):
        verdict, _ = _jump_single_feasibility(c_mag2, a, lambda_lo, lambda_hi, accuracy_lo, accuracy_hi)
        return verdict

    def objective(a):
        return jump_cell_upper(a) / a

    best, tallies = _scan_levels(max(accuracy_lo, 1e-2), 1.0 - 1e-6, feasible, objective)
    if best is None:
        raise InfeasibleDesignError(
            f"no admissible jump cell shape; binding constraint: {_binding(tallies)}",
            binding=_binding(tallies),
        )
    a = best
    b = jump_cell_upper(a)
    n = _cell_count(lambda_lo, lambda_hi, b / a)
    lambdas = _ladder(lambda_lo, a, b / a, n)
    residual = a - b + a * b * math.log(b / a)
    checks = [
        ConditionCheck("cell_equation_residual", abs(residual) <= 1e-12, residual),
        ConditionCheck("accuracy_bracket", accuracy_lo <= a < 1.0 < b <= accuracy_hi, a),
        ConditionCheck("covers_bracket", lambdas[0] * a <= lambda_lo and lambda_hi <= lambdas[-1] * b, lambdas[-1] * b),
    ]
    return GridDesign(
        regime=JUMP_SINGLE,
        a=a,
        b=b,
        epsilon=1.0,
        lambdas=lambdas,
        lambda_lo=lambda_lo,
        lambda_hi=lambda_hi,
        accuracy=(accuracy_lo, accuracy_hi),
        channel=channel,
        checks=tuple(checks),
    )


# -- multi-channel jump regime ------------------------------------------------------------------


def cross_talk_floor(model: QndModel, detector: int, source: int) -> np.ndarray:
    """Known part of the detector intensity per block, excluding the estimated product."""
    mag2 = np.abs(model.c_coeffs) ** 2
    out = np.full(model.blocks.n_blocks, model.theta[detector])
    for kbar in range(model.n_jump):
        if kbar == source:
            continue
        out = out + model.zeta[detector, kbar] * model.iota[kbar] * mag2[kbar]
    return out


def multi_jump_ratio(lam_hats: Sequence[float], c_mag2: np.ndarray, floor: np.ndarray, m: int, i: int, n: int, j: int) -> float:
    """Intensity ratio with shot-noise floor; collapses to the single-channel ratio at zero floor."""
    return (lam_hats[m] * c_mag2[i] + floor[i]) / (lam_hats[n] * c_mag2[j] + floor[j])


def _gap_margins(a: float, b: float, eps: float, n_cells: int, rho: np.ndarray) -> tuple[float, float, float]:
    """Worst values of the three gap conditions over cells and blocks (must all be < 0).

    ``rho`` is the per-block ratio of the known intensity floor to the lowest
    candidate intensity.
    """
    r = eps * b / a
    worst1 = worst2 = worst3 = -np.inf
    for n in range(n_cells):
        f = a * rho / r**n  # floor relative to candidate n's intensity
        m1 = 1.0 - r + (b + f) * np.log((r + f) / (1.0 + f))
        m2 = 1.0 - 1.0 / r + (a + f) * np.log((1.0 / r + f) / (1.0 + f))
        m3 = 1.0 - r * r + (eps * b + f) * np.log((r * r + f) / (1.0 + f))
        worst1 = max(worst1, float(np.max(m1)))
        worst2 = max(worst2, float(np.max(m2)))
        worst3 = max(worst3, float(np.max(m3)))
    return worst1, worst2, worst3


def _jump_multi_feasibility(c_mag2, floor, a, b, eps, lambda_lo, lambda_hi, abar, bbar):
    if a / eps < abar:
        return "accuracy_lower"
    if eps * b > bbar:
        return "accuracy_upper"
    if not (0.0 < a < 1.0 < b):
        return "cell_orientation"
    if not (1.0 < eps < EPSILON_LIMIT):
        return "epsilon_range"
    step_ratio = eps * b / a
    n = _cell_count(lambda_lo, lambda_hi, step_ratio)
    rho = floor / (lambda_lo * c_mag2)
    m1, m2, m3 = _gap_margins(a, b, eps, n, rho)
    if m1 >= 0.0:
        return "gap_condition_1"
    if m2 >= 0.0:
        return "gap_condition_2"
    if m3 >= 0.0:
        return "gap_condition_3"
    lam_hats = _ladder(lambda_lo, a, step_ratio, n)
    nb = len(c_mag2)
    over_one, under_one = [], []
    for m in range(n):
        for nn in range(n):
            for i in range(nb):
                for j in range(nb):
                    if m == nn and i == j:
                        continue
                    h = multi_jump_ratio(lam_hats, c_mag2, floor, m, i, nn, j)
                    if abs(h - 1.0) <= RATIO_EXCLUSION:
                        return "ratio_exclusion"
                    if i != j:
                        denom = lam_hats[nn] * c_mag2[j]
                        thr = (_chord_slope(h) * (denom + floor[j]) - floor[j]) / denom
                        if h > 1.0:
                            over_one.append(thr)
                        else:
                            under_one.append(thr)
    if over_one and not (min(over_one) - b > 0.0):
        return "upper_margin"
    if under_one and not (a - max(under_one) > 0.0):
        return "lower_margin"
    return None


def design_jump_multi(
    model: QndModel,
    lambda_lo: float,
    lambda_hi: float,
    accuracy_lo: float,
    accuracy_hi: float,
    channel_pair: tuple[int, int],
) -> GridDesign:
    """Grid for one cross-talk-weighted counting product among several noisy channels.

    ``channel_pair`` is (detector, source).  The shape search runs over
    (a, b, epsilon) with cells near unit ratio and a gap factor epsilon in
    (1, (sqrt(13)-1)/2); candidates step by epsilon*b/a so consecutive cells
    are separated by an ambiguity gap that the third condition controls.
    """
    _validate_bracket(lambda_lo, lambda_hi, accuracy_lo, accuracy_hi)
    detector, source = channel_pair
    if not (0 <= detector < model.n_jump and 0 <= source < model.n_jump):
        raise InfeasibleDesignError("channel_pair out of range", binding="channel_pair")
    c_mag2 = np.abs(model.c_coeffs[source]) ** 2
    if np.any(c_mag2 == 0.0):
        raise InfeasibleDesignError("every block needs a nonzero counting coefficient", binding="c_zero")
    floor = cross_talk_floor(model, detector, source)

    tallies: dict[str, int] = {}
    best = None
    best_obj = -np.inf
    a_step = b_step = e_step = 1e-2
    a_rng = (max(accuracy_lo, 0.30), 1.0 - 1e-6)
    b_rng = (1.0 + 1e-6, max(accuracy_hi, 1.0 + 2e-6))
    e_rng = (1.0 + 1e-6, EPSILON_LIMIT - 1e-9)

    def grid_points(lo, hi, step):
        return np.linspace(lo, hi, max(2, int(round((hi - lo) / step)) + 1))

    for _level in range(3):
        for eps in grid_points(*e_rng, e_step):
            # accuracy bounds prune the (a, b) box before any expensive check
            a_lo = max(a_rng[0], accuracy_lo * eps)
            b_hi = min(b_rng[1], accuracy_hi / eps)
            if a_lo >= a_rng[1] or b_hi <= b_rng[0]:
                tallies["accuracy_bracket"] = tallies.get("accuracy_bracket", 0) + 1
                continue
            for a in grid_points(a_lo, a_rng[1], a_step):
                for b in grid_points(b_rng[0], b_hi, b_step):
                    verdict = _jump_multi_feasibility(
                        c_mag2, floor, float(a), float(b), float(eps), lambda_lo, lambda_hi, accuracy_lo, accuracy_hi
                    )
                    if verdict is None:
                        obj = eps * b / a
                        if obj > best_obj + 1e-12:
                            best_obj = obj
                            best = (float(a), float(b), float(eps))
                    else:
                        tallies[verdict] = tallies.get(verdict, 0) + 1
        if best is None:
            raise InfeasibleDesignError(
                f"no admissible multi-channel cell shape; binding constraint: {_binding(tallies)}",
                binding=_binding(tallies),
            )
        a0, b0, e0 = best
        a_rng = (max(a_rng[0], a0 - a_step), min(a_rng[1], a0 + a_step))
        b_rng = (max(b_rng[0], b0 - b_step), min(b_rng[1], b0 + b_step))
        e_rng = (max(e_rng[0], e0 - e_step), min(e_rng[1], e0 + e_step))
        a_step /= 10.0
        b_step /= 10.0
        e_step /= 10.0

    a, b, eps = best
    step_ratio = eps * b / a
    n = _cell_count(lambda_lo, lambda_hi, step_ratio)
    lambdas = _ladder(lambda_lo, a, step_ratio, n)
    rho = floor / (lambda_lo * c_mag2)
    m1, m2, m3 = _gap_margins(a, b, eps, n, rho)
    checks = [
        ConditionCheck("gap_condition_1", m1 < 0.0, m1),
        ConditionCheck("gap_condition_2", m2 < 0.0, m2),
        ConditionCheck("gap_condition_3", m3 < 0.0, m3),
        ConditionCheck("epsilon_range", 1.0 < eps < EPSILON_LIMIT, eps),
        ConditionCheck("accuracy_bracket", accuracy_lo <= a / eps and eps * b <= accuracy_hi, a / eps),
        ConditionCheck("covers_bracket", lambdas[0] * a <= lambda_lo and lambda_hi <= lambdas[-1] * b * eps, lambdas[-1] * b * eps),
    ]
    return GridDesign(
        regime=JUMP_MULTI,
        a=a,
        b=b,
        epsilon=eps,
        lambdas=lambdas,
        lambda_lo=lambda_lo,
        lambda_hi=lambda_hi,
        accuracy=(accuracy_lo, accuracy_hi),
        channel=detector,
        source_channel=source,
        checks=tuple(checks),
    )


def _validate_bracket(lambda_lo, lambda_hi, accuracy_lo, accuracy_hi):
    if not 0.0 < lambda_lo < lambda_hi:
        raise InfeasibleDesignError("need 0 < lambda_lo < lambda_hi", binding="bracket")
    if not 0.0 < accuracy_lo < 1.0 < accuracy_hi:
        raise InfeasibleDesignError("need accuracy_lo < 1 < accuracy_hi", binding="accuracy")


# -- refinement ---------------------------------------------------------------------------------


def refine_bracket(grid: GridDesign, pair: tuple[int, int]) -> tuple[float, float]:
    """Shrunk admissible bracket after an oscillatory outcome on adjacent cells.

    For gapped (multi) grids the bracket widens by the gap factor on both
    sides, since single convergence there certifies the enlarged range.
    """
    n, n1 = pair
    if not (0 <= n < n1 < grid.n_cells and n1 == n + 1):
        raise ValueError("refinement needs a valid adjacent pair")
    lo = grid.a * grid.lambdas[n]
    hi = grid.b * grid.lambdas[n1]
    if grid.regime == JUMP_MULTI:
        return lo / grid.epsilon, hi * grid.epsilon
    return lo, hi


def final_bracket(grid: GridDesign, n: int) -> tuple[float, float]:
    """Certified bracket after single convergence on cell ``n``."""
    lo, hi = grid.cell(n)
    if grid.regime == JUMP_MULTI:
        return lo / grid.epsilon, hi * grid.epsilon
    return lo, hi
