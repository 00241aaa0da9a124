"""QND system model: block structure, operators, parameters, derived rate coefficients.

The monitored system lives on a direct sum of blocks.  Every operator is
block-diagonal; the diffusive and counting measurement operators are scalar on
each block, so the model stores those scalars directly and synthesizes full
matrices on demand.  All value-level checks (Hermiticity, parameter ranges,
distinguishability) are reported by :func:`validate_model`; shape consistency
is enforced at construction and raises :class:`ModelStructureError`.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import ModelStructureError

# Inputs are exact user data, so tolerances are tight.
HERMITICITY_ATOL = 1e-12


@dataclass(frozen=True)
class BlockStructure:
    """Direct-sum decomposition of the Hilbert space into at least two blocks."""

    block_dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.block_dims)
        object.__setattr__(self, "block_dims", dims)
        if len(dims) < 2:
            raise ModelStructureError("need at least two blocks")
        if any(d < 1 for d in dims):
            raise ModelStructureError("every block dimension must be >= 1")

    @property
    def n_blocks(self) -> int:
        return len(self.block_dims)

    @property
    def total_dim(self) -> int:
        return sum(self.block_dims)

    @cached_property
    def offsets(self) -> tuple[int, ...]:
        out, acc = [], 0
        for d in self.block_dims:
            out.append(acc)
            acc += d
        return tuple(out)

    def block_slice(self, j: int) -> slice:
        return slice(self.offsets[j], self.offsets[j] + self.block_dims[j])

    def projector(self, j: int) -> np.ndarray:
        """Orthogonal projector onto block ``j`` as a full matrix."""
        p = np.zeros((self.total_dim, self.total_dim), dtype=complex)
        s = self.block_slice(j)
        p[s, s] = np.eye(self.block_dims[j])
        return p

    @cached_property
    def block_index(self) -> np.ndarray:
        """Length ``total_dim`` vector mapping each basis index to its block."""
        idx = np.empty(self.total_dim, dtype=np.intp)
        for j in range(self.n_blocks):
            idx[self.block_slice(j)] = j
        return idx

    def block_weights(self, rho: np.ndarray) -> np.ndarray:
        """Tr(P_j rho) for every block; accepts a batch of matrices."""
        diag = np.diagonal(rho, axis1=-2, axis2=-1).real
        return np.stack(
            [diag[..., self.block_slice(j)].sum(axis=-1) for j in range(self.n_blocks)],
            axis=-1,
        )

    def expand(self, per_block: np.ndarray) -> np.ndarray:
        """Broadcast per-block scalars (..., n_blocks) to diagonal entries (..., total_dim)."""
        return np.asarray(per_block)[..., self.block_index]


def _as_complex_matrix(x, name: str, dim: int) -> np.ndarray:
    m = np.asarray(x, dtype=complex)
    if m.shape != (dim, dim):
        raise ModelStructureError(f"{name} must be {dim}x{dim}, got {m.shape}")
    return m


@dataclass(frozen=True)
class QndModel:
    """Block-diagonal model of a continuously monitored open quantum system.

    Fields
    ------
    blocks:
        The block decomposition.
    h_blocks:
        Hamiltonian blocks, one square matrix per block (energy units).
    l_coeffs:
        Complex scalars of the diffusive measurement operators, shape
        ``(n_diffusive, n_blocks)``.
    c_coeffs:
        Complex scalars of the counting measurement operators, shape
        ``(n_jump, n_blocks)``.
    a_blocks:
        Optional extra dissipation channels; for each channel a tuple of one
        matrix per block.
    gamma, eta:
        Diffusive coupling strengths (>= 0) and efficiencies (in [0, 1]).
    iota, theta:
        Counting coupling strengths (>= 0) and dark-count rates (>= 0).
    zeta:
        Detector cross-talk matrix, shape ``(n_jump, n_jump)``; entry (k, kbar)
        is the probability a photon from channel kbar registers on detector k.
    """

    blocks: BlockStructure
    h_blocks: tuple[np.ndarray, ...]
    l_coeffs: np.ndarray
    c_coeffs: np.ndarray
    a_blocks: tuple[tuple[np.ndarray, ...], ...]
    gamma: np.ndarray
    eta: np.ndarray
    iota: np.ndarray
    theta: np.ndarray
    zeta: np.ndarray

    def __post_init__(self):
        nb = self.blocks.n_blocks
        dims = self.blocks.block_dims

        h = tuple(_as_complex_matrix(m, f"h_blocks[{j}]", dims[j]) for j, m in enumerate(self.h_blocks))
        if len(h) != nb:
            raise ModelStructureError(f"expected {nb} Hamiltonian blocks, got {len(h)}")
        object.__setattr__(self, "h_blocks", h)

        l = np.atleast_2d(np.asarray(self.l_coeffs, dtype=complex))
        c = np.atleast_2d(np.asarray(self.c_coeffs, dtype=complex))
        if l.size == 0:
            l = l.reshape(0, nb)
        if c.size == 0:
            c = c.reshape(0, nb)
        if l.shape[1] != nb or c.shape[1] != nb:
            raise ModelStructureError("l_coeffs/c_coeffs second axis must equal the number of blocks")
        object.__setattr__(self, "l_coeffs", l)
        object.__setattr__(self, "c_coeffs", c)

        a = tuple(
            tuple(_as_complex_matrix(m, f"a_blocks[{k}][{j}]", dims[j]) for j, m in enumerate(chan))
            for k, chan in enumerate(self.a_blocks)
        )
        for k, chan in enumerate(a):
            if len(chan) != nb:
                raise ModelStructureError(f"a_blocks[{k}] must have one matrix per block")
        object.__setattr__(self, "a_blocks", a)

        nd, nj = l.shape[0], c.shape[0]
        for name, val, length in (
            ("gamma", self.gamma, nd),
            ("eta", self.eta, nd),
            ("iota", self.iota, nj),
            ("theta", self.theta, nj),
        ):
            arr = np.asarray(val, dtype=float).reshape(-1)
            if arr.shape != (length,):
                raise ModelStructureError(f"{name} must have length {length}, got {arr.shape}")
            object.__setattr__(self, name, arr)
        z = np.asarray(self.zeta, dtype=float)
        if z.size == 0:
            z = z.reshape(nj, nj) if nj == 0 else z
        if z.shape != (nj, nj):
            raise ModelStructureError(f"zeta must be {nj}x{nj}, got {z.shape}")
        object.__setattr__(self, "zeta", z)

    # -- convenience constructors -------------------------------------------------

    @classmethod
    def create(
        cls,
        block_dims: Sequence[int],
        l_coeffs=(),
        c_coeffs=(),
        gamma=(),
        eta=(),
        iota=(),
        theta=(),
        zeta=None,
        h_blocks=None,
        a_blocks=(),
    ) -> "QndModel":
        blocks = BlockStructure(tuple(block_dims))
        if h_blocks is None:
            h_blocks = tuple(np.zeros((d, d), dtype=complex) for d in blocks.block_dims)
        l = np.atleast_2d(np.asarray(l_coeffs, dtype=complex))
        c = np.atleast_2d(np.asarray(c_coeffs, dtype=complex))
        if l.size == 0:
            l = l.reshape(0, blocks.n_blocks)
        if c.size == 0:
            c = c.reshape(0, blocks.n_blocks)
        nj = c.shape[0]
        if zeta is None:
            zeta = np.eye(nj)
        return cls(
            blocks=blocks,
            h_blocks=tuple(h_blocks),
            l_coeffs=l,
            c_coeffs=c,
            a_blocks=tuple(a_blocks),
            gamma=np.asarray(gamma, dtype=float),
            eta=np.asarray(eta, dtype=float),
            iota=np.asarray(iota, dtype=float),
            theta=np.asarray(theta, dtype=float),
            zeta=np.asarray(zeta, dtype=float),
        )

    # -- basic shape info ----------------------------------------------------------

    @property
    def n_diffusive(self) -> int:
        return self.l_coeffs.shape[0]

    @property
    def n_jump(self) -> int:
        return self.c_coeffs.shape[0]

    @property
    def dim(self) -> int:
        return self.blocks.total_dim

    # -- synthesized operators -----------------------------------------------------

    @cached_property
    def hamiltonian(self) -> np.ndarray:
        h = np.zeros((self.dim, self.dim), dtype=complex)
        for j, block in enumerate(self.h_blocks):
            s = self.blocks.block_slice(j)
            h[s, s] = block
        return h

    @cached_property
    def l_diagonals(self) -> np.ndarray:
        """Diagonal entries of each diffusive operator, shape (n_diffusive, dim)."""
        return self.blocks.expand(self.l_coeffs)

    @cached_property
    def c_diagonals(self) -> np.ndarray:
        return self.blocks.expand(self.c_coeffs)

    @cached_property
    def a_full(self) -> tuple[np.ndarray, ...]:
        out = []
        for chan in self.a_blocks:
            m = np.zeros((self.dim, self.dim), dtype=complex)
            for j, block in enumerate(chan):
                s = self.blocks.block_slice(j)
                m[s, s] = block
            out.append(m)
        return tuple(out)

    def diffusive_operator(self, k: int) -> np.ndarray:
        return np.diag(self.l_diagonals[k])

    def jump_operator(self, k: int) -> np.ndarray:
        return np.diag(self.c_diagonals[k])


@dataclass(frozen=True)
class Violation:
    """One failed invariant or assumption clause."""

    code: str
    message: str
    where: tuple | None = None

    def __str__(self):
        loc = f" at {self.where}" if self.where is not None else ""
        return f"[{self.code}]{loc} {self.message}"


def _cross_talk_is_diagonal(zeta: np.ndarray) -> bool:
    off = zeta - np.diag(np.diag(zeta))
    return not np.any(off != 0.0)


def validate_model(model: QndModel) -> list[Violation]:
    """Check value-level invariants and the distinguishability assumptions.

    Returns one entry per violated clause; an empty list means the model is a
    valid QND setup whose records identify the block.  The jump clause is
    relaxed to unordered magnitude distinctness when the cross-talk matrix is
    exactly diagonal.
    """
    out: list[Violation] = []

    for j, h in enumerate(model.h_blocks):
        dev = float(np.max(np.abs(h - h.conj().T))) if h.size else 0.0
        if dev > HERMITICITY_ATOL:
            out.append(Violation("H_NOT_HERMITIAN", f"max |H - H^dag| = {dev:.3e}", (j,)))

    for k, g in enumerate(model.gamma):
        if g < 0:
            out.append(Violation("GAMMA_RANGE", f"gamma[{k}] = {g} < 0", (k,)))
    for k, e in enumerate(model.eta):
        if not (0.0 <= e <= 1.0):
            out.append(Violation("ETA_RANGE", f"eta[{k}] = {e} outside [0, 1]", (k,)))
    for k, v in enumerate(model.iota):
        if v < 0:
            out.append(Violation("IOTA_RANGE", f"iota[{k}] = {v} < 0", (k,)))
    for k, v in enumerate(model.theta):
        if v < 0:
            out.append(Violation("THETA_RANGE", f"theta[{k}] = {v} < 0", (k,)))
    if np.any(model.zeta < 0):
        out.append(Violation("ZETA_RANGE", "cross-talk entries must be nonnegative"))
    col_sums = model.zeta.sum(axis=0) if model.n_jump else np.zeros(0)
    for kbar, s in enumerate(col_sums):
        if s > 1.0 + 1e-15:
            out.append(Violation("ZETA_COLUMN_SUM", f"column {kbar} sums to {s} > 1", (kbar,)))

    nb = model.blocks.n_blocks
    re_l = model.l_coeffs.real

    # Diffusive clause: every block pair must differ in some channel's real part.
    for i in range(nb):
        for j in range(i + 1, nb):
            if model.n_diffusive == 0 or not np.any(re_l[:, i] != re_l[:, j]):
                out.append(
                    Violation("A2.1", f"no diffusive channel separates blocks {i} and {j}", (i, j))
                )

    # Jump clause: strict magnitude ordering per channel, relaxed to pairwise
    # distinctness when there is no cross-talk.
    if model.n_jump:
        mags = np.abs(model.c_coeffs)
        if _cross_talk_is_diagonal(model.zeta):
            for i in range(nb):
                for j in range(i + 1, nb):
                    if not np.any(mags[:, i] != mags[:, j]):
                        out.append(
                            Violation(
                                "A2.2'",
                                f"no counting channel separates blocks {i} and {j}",
                                (i, j),
                            )
                        )
        else:
            for k in range(model.n_jump):
                for j in range(nb):
                    for i in range(j + 1, nb):
                        if not (mags[k, i] > mags[k, j]):
                            out.append(
                                Violation(
                                    "A2.2",
                                    f"|c[{k},{i}]| must exceed |c[{k},{j}]| under cross-talk",
                                    (k, i, j),
                                )
                            )
    return out


def jump_rate_table(model: QndModel) -> np.ndarray:
    """Counting intensity of each detector when the state sits in each block.

    Entry (k, j) is ``theta_k + sum_kbar zeta[k, kbar] iota_kbar |c[kbar, j]|^2``;
    shape ``(n_jump, n_blocks)``.
    """
    if model.n_jump == 0:
        return np.zeros((0, model.blocks.n_blocks))
    mag2 = np.abs(model.c_coeffs) ** 2
    return model.theta[:, None] + (model.zeta * model.iota[None, :]) @ mag2


def reduction_rate(model: QndModel) -> float:
    """Smallest pairwise block-distinguishability rate.

    Half of this constant bounds the exponential collapse of block coherences;
    it is strictly positive exactly when some channel separates every pair.
    """
    nb = model.blocks.n_blocks
    re_l = model.l_coeffs.real
    ew = model.eta * model.gamma
    rates = jump_rate_table(model)
    sqrt_rates = np.sqrt(rates) if rates.size else rates

    best = np.inf
    for i in range(nb):
        for j in range(i + 1, nb):
            diff = float(np.sum(ew * (re_l[:, i] - re_l[:, j]) ** 2)) if model.n_diffusive else 0.0
            jump = float(np.sum((sqrt_rates[:, i] - sqrt_rates[:, j]) ** 2)) if model.n_jump else 0.0
            best = min(best, diff + jump)
    return best


# -- serialization ------------------------------------------------------------------


def _complex_to_pairs(arr: np.ndarray) -> list:
    a = np.asarray(arr, dtype=complex)
    stacked = np.stack([a.real, a.imag], axis=-1)
    return stacked.tolist()


def _pairs_to_complex(data) -> np.ndarray:
    a = np.asarray(data, dtype=float)
    if a.shape[-1] != 2:
        raise ModelStructureError("complex entries must be [re, im] pairs")
    return a[..., 0] + 1j * a[..., 1]


MODEL_KEYS = {
    "block_dims",
    "l_coeffs",
    "c_coeffs",
    "gamma",
    "eta",
    "iota",
    "theta",
    "zeta",
    "h_blocks",
    "a_blocks",
}


def model_to_dict(model: QndModel) -> dict:
    d = {
        "block_dims": list(model.blocks.block_dims),
        "l_coeffs": _complex_to_pairs(model.l_coeffs),
        "c_coeffs": _complex_to_pairs(model.c_coeffs),
        "gamma": model.gamma.tolist(),
        "eta": model.eta.tolist(),
        "iota": model.iota.tolist(),
        "theta": model.theta.tolist(),
        "zeta": model.zeta.tolist(),
    }
    if any(np.any(h != 0) for h in model.h_blocks):
        d["h_blocks"] = [_complex_to_pairs(h) for h in model.h_blocks]
    if model.a_blocks:
        d["a_blocks"] = [[_complex_to_pairs(m) for m in chan] for chan in model.a_blocks]
    return d


def model_from_dict(data: dict) -> QndModel:
    unknown = set(data) - MODEL_KEYS
    if unknown:
        raise ModelStructureError(f"unknown model keys: {sorted(unknown)}")
    if "block_dims" not in data:
        raise ModelStructureError("model requires block_dims")
    kwargs = dict(
        block_dims=data["block_dims"],
        l_coeffs=_pairs_to_complex(data["l_coeffs"]) if "l_coeffs" in data else (),
        c_coeffs=_pairs_to_complex(data["c_coeffs"]) if "c_coeffs" in data else (),
        gamma=data.get("gamma", ()),
        eta=data.get("eta", ()),
        iota=data.get("iota", ()),
        theta=data.get("theta", ()),
        zeta=np.asarray(data["zeta"], dtype=float) if "zeta" in data else None,
    )
    if "h_blocks" in data:
        kwargs["h_blocks"] = tuple(_pairs_to_complex(h) for h in data["h_blocks"])
    if "a_blocks" in data:
        kwargs["a_blocks"] = tuple(tuple(_pairs_to_complex(m) for m in chan) for chan in data["a_blocks"])
    return QndModel.create(**kwargs)


def model_digest(model: QndModel) -> str:
    """Stable content hash of the model, used in record headers and manifests."""
    parts = []

    def emit(name, arr):
        flat = np.asarray(arr).reshape(-1)
        parts.append(name + ":" + ",".join(f"{v:.17g}" for v in flat.view(float)))

    parts.append("dims:" + ",".join(map(str, model.blocks.block_dims)))
    emit("l", model.l_coeffs)
    emit("c", model.c_coeffs)
    emit("gamma", model.gamma)
    emit("eta", model.eta)
    emit("iota", model.iota)
    emit("theta", model.theta)
    emit("zeta", model.zeta)
    for j, h in enumerate(model.h_blocks):
        emit(f"h{j}", h)
    for k, chan in enumerate(model.a_blocks):
        for j, m in enumerate(chan):
            emit(f"a{k}.{j}", m)
    return hashlib.sha256("|".join(parts).encode()).hexdigest()
