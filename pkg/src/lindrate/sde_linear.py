"""Linear wave-function equation under the reference probability.

The unnormalized state carries the likelihood: its squared norm is the
martingale density of the physical law with respect to the reference
law.  Averaging bandwise outer products of the state over reference-law
trajectories reproduces the rate-equation solution (the weighted
unravelling); the closed-form exponential-times-jump-product expression
for the density provides an independent oracle for the stepped norm.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import streams
from ._engine import StepperData, batch_norm2, linear_step, normalized_states, signals
from .blockalg import BlockDensity, BlockVector
from .model import RateModel, require_valid


@dataclass(frozen=True)
class NoisePath:
    """Realized reference-law driving noise on a uniform grid.

    wiener holds Normal(0, dt) increments per Wiener channel; jumps
    holds 0/1 indicators per jump channel, each drawn with the constant
    per-step probability 1 - exp(-rate dt) (at most one jump per channel
    per step; the missed double-jump mass is O(dt^2)).
    """

    dt: float
    times: np.ndarray
    wiener: np.ndarray   # (steps, n_wiener)
    jumps: np.ndarray    # (steps, n_jump), int8
    master_seed: int | None = None
    index: int | None = None


@dataclass(frozen=True)
class LinearTrajectory:
    """Sampled path of the linear equation plus its likelihood weight.

    quad_signals and jump_intensities hold the normalized-state
    functionals evaluated at the left endpoint of every step; they are
    what the closed-form density evaluation consumes.
    """

    times: np.ndarray
    states: np.ndarray            # (steps+1, n, d)
    weights: np.ndarray           # (steps+1,)  squared norms
    jump_log: tuple
    noise: NoisePath
    quad_signals: np.ndarray      # (steps, n_wiener)
    jump_intensities: np.ndarray  # (steps, n_jump)

    def state_at(self, k: int) -> BlockVector:
        return BlockVector(self.states[k])


def sample_noise_path(model: RateModel, horizon: float, dt: float,
                      master_seed: int, index: int) -> NoisePath:
    """Draw one trajectory's reference-law noise from its own stream."""
    data = StepperData(model)
    n_steps = streams.step_count(horizon, dt)
    rng = streams.trajectory_rng(master_seed, index)
    normals, uniforms = streams.draw_path_noise(
        rng, n_steps, data.n_wiener, data.n_jump, dt)
    probs = -np.expm1(-data.jump_rates * dt)
    jumps = (uniforms < probs[None, :]).astype(np.int8)
    times = np.arange(n_steps + 1) * dt
    return NoisePath(dt=dt, times=times, wiener=normals, jumps=jumps,
                     master_seed=master_seed, index=index)


def step_linear(model: RateModel, state: BlockVector, t: float, dt: float,
                wiener: np.ndarray, jumps: np.ndarray,
                data: StepperData | None = None) -> BlockVector:
    """One Euler step from the pre-step state.

    wiener has one Normal(0, dt) increment per Wiener channel and jumps
    one 0/1 indicator per jump channel, ordered as in
    ``RateModel.jump_labels``.
    """
    if data is None:
        data = StepperData(model)
    Z = state.blocks[None]
    out = linear_step(data, Z, t, dt, np.atleast_2d(wiener),
                      np.atleast_2d(np.asarray(jumps, dtype=float)))
    return BlockVector(out[0])


def simulate_linear(model: RateModel, zeta0: BlockVector, horizon: float,
                    dt: float, master_seed: int = 0, index: int = 0,
                    noise: NoisePath | None = None) -> LinearTrajectory:
    """Integrate one linear trajectory, recording everything the
    closed-form density oracle needs."""
    require_valid(model)
    data = StepperData(model)
    if noise is None:
        noise = sample_noise_path(model, horizon, dt, master_seed, index)
    n_steps = noise.wiener.shape[0]

    Z = zeta0.blocks[None].astype(complex)
    states = np.empty((n_steps + 1,) + Z.shape[1:], dtype=complex)
    states[0] = Z[0]
    weights = np.empty(n_steps + 1)
    weights[0] = batch_norm2(Z)[0]
    sig_v = np.empty((n_steps, data.n_wiener))
    sig_I = np.empty((n_steps, data.n_jump))
    jump_log = []
    labels = model.jump_labels()

    for k in range(n_steps):
        t = noise.times[k]
        psi = normalized_states(Z)
        v, intens, _, _ = signals(data, psi, t)
        sig_v[k] = v[0]
        sig_I[k] = intens[0]
        jrow = noise.jumps[k].astype(float)
        for q in np.nonzero(noise.jumps[k])[0]:
            jump_log.append((float(noise.times[k + 1]), labels[q]))
        Z = linear_step(data, Z, t, dt, noise.wiener[k][None], jrow[None])
        states[k + 1] = Z[0]
        weights[k + 1] = batch_norm2(Z)[0]

    return LinearTrajectory(times=noise.times, states=states, weights=weights,
                            jump_log=tuple(jump_log), noise=noise,
                            quad_signals=sig_v, jump_intensities=sig_I)


def doleans_density(traj: LinearTrajectory, model: RateModel) -> np.ndarray:
    """Closed-form likelihood along the path.

    Exponential of the quadrature stochastic integrals minus half their
    brackets, times jump-compensator exponentials, times the finite
    product of intensity ratios over realized jumps.  Uses the stored
    left-endpoint signals, so it differs from the stepped squared norm
    by the discretization error only.
    """
    data = StepperData(model)
    dt = traj.noise.dt
    v = traj.quad_signals
    I = traj.jump_intensities
    dW = traj.noise.wiener
    fired = traj.noise.jumps.astype(bool)
    rates = data.jump_rates

    diff_term = (v * dW).sum(axis=1) - 0.5 * (v**2).sum(axis=1) * dt
    comp_term = ((rates[None, :] - I) * dt).sum(axis=1)
    log_part = np.concatenate([[0.0], np.cumsum(diff_term + comp_term)])

    ratios = np.ones(I.shape[0])
    for q in range(data.n_jump):
        hit = fired[:, q]
        if hit.any():
            ratios[hit] *= I[hit, q] / rates[q]
    prod_part = np.concatenate([[1.0], np.cumprod(ratios)])

    return traj.weights[0] * np.exp(log_part) * prod_part


# ---------------------------------------------------------------------------
# Initial-state sampling and weighted unravelling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InitialSampler:
    """Pure-state ensemble whose mean outer product is the target state.

    Built by bandwise eigendecomposition: each member is one eigenvector
    placed in its band, drawn with its eigenvalue as weight.  Rank-one
    targets make the draw deterministic.
    """

    weights: np.ndarray   # (M,)
    vectors: np.ndarray   # (M, n, d)

    @property
    def deterministic(self) -> bool:
        return len(self.weights) == 1

    @classmethod
    def from_density(cls, eta0: BlockDensity, tol: float = 1e-12) -> "InitialSampler":
        eta0.require_valid()
        weights, vectors = [], []
        for i, b in enumerate(eta0.blocks):
            w, U = np.linalg.eigh((b + b.conj().T) / 2)
            for m in range(len(w)):
                if w[m] > tol:
                    vec = np.zeros_like(eta0.blocks[:, :, 0])
                    vec[i] = U[:, m]
                    weights.append(w[m])
                    vectors.append(vec)
        weights = np.asarray(weights, dtype=float)
        if weights.size == 0:
            raise ValueError("initial state has no weight")
        return cls(weights=weights / weights.sum(), vectors=np.stack(vectors))

    def draw_one(self, rng: np.random.Generator) -> np.ndarray:
        if self.deterministic:
            return self.vectors[0]
        m = rng.choice(len(self.weights), p=self.weights)
        return self.vectors[m]


@dataclass
class UnravellingEstimate:
    """Monte Carlo state estimate with componentwise standard errors.

    entry_stderr combines the real and imaginary scatter per matrix
    entry; block_stderr aggregates it per band in the Frobenius sense;
    total_variance is the summed estimator variance over all entries.
    For the weighted unravelling, weight statistics of the likelihood at
    requested checkpoint times ride along.
    """

    mean: BlockDensity
    entry_stderr: np.ndarray
    block_stderr: np.ndarray
    n_traj: int
    total_variance: float
    weight_stats: dict | None = None


class _MomentAccumulator:
    def __init__(self, shape):
        self.count = 0
        self.sum = np.zeros(shape, dtype=complex)
        self.sq_re = np.zeros(shape)
        self.sq_im = np.zeros(shape)

    def add_batch(self, samples: np.ndarray):
        self.count += samples.shape[0]
        self.sum += samples.sum(axis=0)
        self.sq_re += (samples.real**2).sum(axis=0)
        self.sq_im += (samples.imag**2).sum(axis=0)

    def finish(self, weight_stats=None) -> UnravellingEstimate:
        N = self.count
        mean = self.sum / N
        var_re = np.maximum(self.sq_re / N - mean.real**2, 0.0)
        var_im = np.maximum(self.sq_im / N - mean.imag**2, 0.0)
        entry_var = (var_re + var_im) / N
        entry_stderr = np.sqrt(entry_var)
        block_stderr = np.sqrt(entry_var.sum(axis=(1, 2)))
        return UnravellingEstimate(
            mean=BlockDensity(mean),
            entry_stderr=entry_stderr,
            block_stderr=block_stderr,
            n_traj=N,
            total_variance=float(entry_var.sum()),
            weight_stats=weight_stats,
        )


def unravel_weighted(model: RateModel, eta0: BlockDensity, horizon: float,
                     n_traj: int, dt: float, master_seed: int,
                     weight_times: tuple = (),
                     chunk_size: int = streams.DEFAULT_CHUNK) -> UnravellingEstimate:
    """Estimate the rate-equation solution from the linear unravelling.

    Averages bandwise outer products of the unnormalized state over
    reference-law trajectories.  The likelihood weight enters through
    the state's norm, so no explicit reweighting appears.  Trajectory i
    always consumes the stream keyed by (master_seed, i); chunking only
    fixes the reduction order.
    """
    require_valid(model)
    data = StepperData(model)
    n_steps = streams.step_count(horizon, dt)
    sampler = InitialSampler.from_density(eta0)
    probs = -np.expm1(-data.jump_rates * dt)

    check_idx = {}
    for tw in weight_times:
        k = int(round(tw / dt))
        if abs(k * dt - tw) > 1e-9 or not 0 <= k <= n_steps:
            raise ValueError(f"weight checkpoint {tw} is off the step grid")
        check_idx[float(tw)] = k

    acc = _MomentAccumulator((model.n, model.d, model.d))
    weight_samples = {t: [] for t in check_idx}

    for start, stop in streams.chunk_ranges(n_traj, chunk_size):
        C = stop - start
        normals = np.empty((C, n_steps, data.n_wiener))
        uniforms = np.empty((C, n_steps, data.n_jump))
        Z = np.empty((C, model.n, model.d), dtype=complex)
        for c, i in enumerate(range(start, stop)):
            rng = streams.trajectory_rng(master_seed, i)
            Z[c] = sampler.draw_one(rng)
            normals[c], uniforms[c] = streams.draw_path_noise(
                rng, n_steps, data.n_wiener, data.n_jump, dt)

        for t_label, k in check_idx.items():
            if k == 0:
                weight_samples[t_label].append(batch_norm2(Z))
        for k in range(n_steps):
            jumps = (uniforms[:, k] < probs[None, :]).astype(float)
            Z = linear_step(data, Z, k * dt, dt, normals[:, k], jumps)
            for t_label, k_want in check_idx.items():
                if k_want == k + 1:
                    weight_samples[t_label].append(batch_norm2(Z))

        acc.add_batch(np.einsum("cja,cjb->cjab", Z, Z.conj()))

    weight_stats = None
    if check_idx:
        weight_stats = {}
        for t_label, parts in weight_samples.items():
            ws = np.concatenate(parts)
            weight_stats[t_label] = (float(ws.mean()),
                                     float(ws.std(ddof=1) / np.sqrt(len(ws))))
    return acc.finish(weight_stats)


def write_trajectory_csv(path, traj: LinearTrajectory) -> None:
    """Dump a sampled path: time, flattened state, weight."""
    n, d = traj.states.shape[1:]
    header = ["time"]
    for i in range(n):
        for a in range(d):
            header += [f"re_b{i + 1}_{a}", f"im_b{i + 1}_{a}"]
    header.append("weight")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k, t in enumerate(traj.times):
            row = [repr(float(t))]
            for val in traj.states[k].ravel():
                row += [repr(float(val.real)), repr(float(val.imag))]
            row.append(repr(float(traj.weights[k])))
            w.writerow(row)


def write_jump_sidecar_csv(path, traj: LinearTrajectory) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "channel"])
        for t, label in traj.jump_log:
            w.writerow([repr(float(t)), "/".join(str(x) for x in label)])
