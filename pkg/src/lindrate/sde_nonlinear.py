"""Normalized wave-function equation under the physical probability.

The drift and noise coefficients are the measure-changed versions of the
linear equation: Wiener drivers acquire the quadrature-signal drift and
the jump channels fire at state-dependent intensities (simulated by
per-step thinning at the left limit).  Averaging bandwise outer products
without weights reproduces the rate-equation solution and is the
efficient estimator of the pair.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import streams
from ._engine import StepperData, physical_step
from .blockalg import BlockDensity, BlockVector
from .model import RateModel, require_valid
from .sde_linear import InitialSampler, UnravellingEstimate, _MomentAccumulator


@dataclass(frozen=True)
class PhysicalTrajectory:
    """Sampled path of the normalized state with its realized signals.

    wiener holds the driving Wiener increments of the physical law (the
    innovation part); the observable output increments are these plus
    the recorded quadrature signals times dt.  fired marks realized
    jumps per flattened channel.
    """

    times: np.ndarray
    states: np.ndarray          # (steps+1, n, d), unit norm
    quad_signals: np.ndarray    # (steps, n_wiener)
    jump_intensities: np.ndarray  # (steps, n_jump)
    wiener: np.ndarray          # (steps, n_wiener)
    fired: np.ndarray           # (steps, n_jump), int8
    jump_log: tuple

    def state_at(self, k: int) -> BlockVector:
        return BlockVector(self.states[k])


def step_physical(model: RateModel, state: BlockVector, t: float, dt: float,
                  wiener: np.ndarray, uniforms: np.ndarray,
                  data: StepperData | None = None, renormalize: bool = True):
    """One Euler step from a unit-norm pre-step state.

    wiener carries Normal(0, dt) innovation increments; uniforms carries
    one U(0,1) draw per jump channel, thinned against the state's
    intensities.  Returns (BlockVector, events) where events lists the
    labels of channels that fired.
    """
    if data is None:
        data = StepperData(model)
    out, _, _, fired = physical_step(
        data, state.blocks[None], t, dt, np.atleast_2d(wiener),
        np.atleast_2d(uniforms), renormalize=renormalize)
    events = [data.jump_channels[q].label for q in np.nonzero(fired[0])[0]]
    return BlockVector(out[0]), events


def simulate_physical(model: RateModel, psi0: BlockVector, horizon: float,
                      dt: float, master_seed: int = 0, index: int = 0) -> PhysicalTrajectory:
    """Integrate one physical-law trajectory with full recording."""
    require_valid(model)
    data = StepperData(model)
    n_steps = streams.step_count(horizon, dt)
    rng = streams.trajectory_rng(master_seed, index)
    normals, uniforms = streams.draw_path_noise(
        rng, n_steps, data.n_wiener, data.n_jump, dt)
    times = np.arange(n_steps + 1) * dt

    norm = np.sqrt(np.sum(np.abs(psi0.blocks) ** 2))
    psi = (psi0.blocks / norm)[None].astype(complex)
    states = np.empty((n_steps + 1,) + psi.shape[1:], dtype=complex)
    states[0] = psi[0]
    sig_v = np.empty((n_steps, data.n_wiener))
    sig_I = np.empty((n_steps, data.n_jump))
    fired_all = np.zeros((n_steps, data.n_jump), dtype=np.int8)
    jump_log = []
    labels = model.jump_labels()

    for k in range(n_steps):
        psi, v, intens, fired = physical_step(
            data, psi, k * dt, dt, normals[k][None], uniforms[k][None])
        states[k + 1] = psi[0]
        sig_v[k] = v[0]
        sig_I[k] = intens[0]
        fired_all[k] = fired[0]
        for q in np.nonzero(fired[0])[0]:
            jump_log.append((float(times[k + 1]), labels[q]))

    return PhysicalTrajectory(times=times, states=states, quad_signals=sig_v,
                              jump_intensities=sig_I, wiener=normals,
                              fired=fired_all, jump_log=tuple(jump_log))


def unravel_normalized(model: RateModel, eta0: BlockDensity, horizon: float,
                       n_traj: int, dt: float, master_seed: int,
                       chunk_size: int = streams.DEFAULT_CHUNK) -> UnravellingEstimate:
    """Estimate the rate-equation solution from the normalized unravelling.

    Plain (unweighted) mean of bandwise outer products over physical-law
    trajectories, on the same stream policy as the weighted estimator so
    both can run on identical budgets.
    """
    require_valid(model)
    data = StepperData(model)
    n_steps = streams.step_count(horizon, dt)
    sampler = InitialSampler.from_density(eta0)

    acc = _MomentAccumulator((model.n, model.d, model.d))
    for start, stop in streams.chunk_ranges(n_traj, chunk_size):
        C = stop - start
        normals = np.empty((C, n_steps, data.n_wiener))
        uniforms = np.empty((C, n_steps, data.n_jump))
        psi = np.empty((C, model.n, model.d), dtype=complex)
        for c, i in enumerate(range(start, stop)):
            rng = streams.trajectory_rng(master_seed, i)
            psi[c] = sampler.draw_one(rng)
            normals[c], uniforms[c] = streams.draw_path_noise(
                rng, n_steps, data.n_wiener, data.n_jump, dt)

        for k in range(n_steps):
            psi, _, _, _ = physical_step(
                data, psi, k * dt, dt, normals[:, k], uniforms[:, k])
        acc.add_batch(np.einsum("cja,cjb->cjab", psi, psi.conj()))
    return acc.finish()
