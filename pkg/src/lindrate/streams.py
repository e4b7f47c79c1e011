"""Reproducible per-trajectory random streams.

Every trajectory gets its own generator keyed by (master seed,
trajectory index), so results do not depend on how trajectories are
batched or scheduled.  Reductions accumulate per fixed-size chunk and
then sum the chunk results, which pins the floating-point summation
order independently of worker count.
"""

from __future__ import annotations

import numpy as np

DEFAULT_CHUNK = 512


def trajectory_rng(master_seed: int, index: int) -> np.random.Generator:
    """Independent stream for one trajectory, derived from (seed, index)."""
    return np.random.default_rng(np.random.SeedSequence((master_seed, index)))


def draw_path_noise(rng: np.random.Generator, n_steps: int, n_wiener: int,
                    n_jump: int, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Bulk noise for one trajectory: Wiener increments and jump uniforms.

    Consumption order is fixed (normals first, uniforms second) so a
    trajectory's noise is a pure function of its stream.
    """
    normals = rng.standard_normal((n_steps, n_wiener)) * np.sqrt(dt)
    uniforms = rng.random((n_steps, n_jump))
    return normals, uniforms


def chunk_ranges(total: int, size: int = DEFAULT_CHUNK):
    """Yield (start, stop) pairs covering range(total) in fixed chunks."""
    start = 0
    while start < total:
        stop = min(start + size, total)
        yield start, stop
        start = stop


def step_count(horizon: float, dt: float) -> int:
    steps = int(round(horizon / dt))
    if steps < 1 or abs(steps * dt - horizon) > 1e-9 * max(1.0, horizon):
        raise ValueError(f"horizon {horizon} is not an integer multiple of dt {dt}")
    return steps
