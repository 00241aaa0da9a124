"""Reproducible per-trajectory noise streams.

Each trajectory owns a counter-based Philox stream keyed by
``(seed, round, trajectory)``, so ensembles can be generated in any order or
in parallel without changing a single byte of output.  Gaussians come from
Box-Muller applied to the stream's uniforms (rather than the generator's own
normal method) so that record files are reproducible from the documented
uniform stream alone.

Draw order for one trajectory of S steps:
``normals(S * n_diffusive)`` reshaped row-major to (S, n_diffusive), then
``uniforms(S * n_jump)`` reshaped to (S, n_jump).  When running in time
chunks the same order applies per chunk.
"""

from __future__ import annotations

import numpy as np


class TrajectoryStream:
    """Noise source for a single trajectory."""

    def __init__(self, seed: int, traj: int, round_index: int = 0):
        ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(round_index), int(traj)))
        self._gen = np.random.Generator(np.random.Philox(ss))

    def uniforms(self, n: int) -> np.ndarray:
        return self._gen.random(n)

    def normals(self, n: int) -> np.ndarray:
        """Standard normals via Box-Muller; an odd request discards the spare variate."""
        pairs = (n + 1) // 2
        u = self._gen.random((2, pairs))
        radius = np.sqrt(-2.0 * np.log1p(-u[0]))  # 1 - u avoids log(0)
        angle = 2.0 * np.pi * u[1]
        z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])
        return z[:n]

    def step_noise(self, steps: int, n_diffusive: int, n_jump: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-step standard normals (steps, n_diffusive) and uniforms (steps, n_jump)."""
        z = self.normals(steps * n_diffusive).reshape(steps, n_diffusive)
        u = self.uniforms(steps * n_jump).reshape(steps, n_jump)
        return z, u
