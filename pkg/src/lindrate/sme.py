"""Measurement layer: observed outputs, filtering equations, instruments.

Only three kinds of output are ever observable: the diagonal Wiener
quadratures, the diagonal counting channels, and the band-summed counts
of the coupling channels.  The record type carries exactly these, so
code cannot read a band-resolved coupling count or a coupling Wiener
noise by construction.

The linear filtering equation propagates an unnormalized conditional
state under the reference law (its total trace is the likelihood of the
record); the normalized equation propagates the conditional state under
the physical law, drawing its own innovations.  Replaying either on a
stored record is deterministic.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import streams
from ._engine import INTENSITY_FLOOR, ThinningError
from .blockalg import BlockDensity
from .master import generator_matrix
from .model import RateModel, require_valid


@dataclass(frozen=True)
class ObservedRecord:
    """Realized observed outputs on a uniform grid (increments per step).

    wiener: output-quadrature increments for the observed diagonal
    diffusive channels; diag_jumps: 0/1 increments of observed diagonal
    counters; coupling_jumps: 0/1 increments of observed band-summed
    counters.  Cumulative counts are nondecreasing integers by
    construction.
    """

    dt: float
    times: np.ndarray
    wiener: np.ndarray          # (steps, n_obs_wiener)
    diag_jumps: np.ndarray      # (steps, n_obs_diag), int8
    coupling_jumps: np.ndarray  # (steps, n_obs_coupling), int8

    def wiener_paths(self) -> np.ndarray:
        out = np.zeros((len(self.times), self.wiener.shape[1]))
        np.cumsum(self.wiener, axis=0, out=out[1:])
        return out

    def counts(self) -> tuple[np.ndarray, np.ndarray]:
        dn = np.zeros((len(self.times), self.diag_jumps.shape[1]), dtype=np.int64)
        dm = np.zeros((len(self.times), self.coupling_jumps.shape[1]), dtype=np.int64)
        np.cumsum(self.diag_jumps, axis=0, out=dn[1:])
        np.cumsum(self.coupling_jumps, axis=0, out=dm[1:])
        return dn, dm

    def save_csv(self, path) -> None:
        """Cumulative outputs, one row per grid time."""
        wn = self.wiener_paths()
        dn, dm = self.counts()
        header = (["time"]
                  + [f"W{a + 1}" for a in range(wn.shape[1])]
                  + [f"N{a + 1}" for a in range(dn.shape[1])]
                  + [f"M{a + 1}" for a in range(dm.shape[1])])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k, t in enumerate(self.times):
                row = [repr(float(t))]
                row += [repr(float(x)) for x in wn[k]]
                row += [str(int(x)) for x in dn[k]]
                row += [str(int(x)) for x in dm[k]]
                w.writerow(row)

    @classmethod
    def load_csv(cls, path) -> "ObservedRecord":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        n_w = sum(1 for h in header if h.startswith("W"))
        n_n = sum(1 for h in header if h.startswith("N"))
        n_m = sum(1 for h in header if h.startswith("M"))
        times = np.array([float(r[0]) for r in body])
        wn = np.array([[float(x) for x in r[1:1 + n_w]] for r in body]).reshape(len(body), n_w)
        dn = np.array([[int(x) for x in r[1 + n_w:1 + n_w + n_n]] for r in body],
                      dtype=np.int64).reshape(len(body), n_n)
        dm = np.array([[int(x) for x in r[1 + n_w + n_n:1 + n_w + n_n + n_m]] for r in body],
                      dtype=np.int64).reshape(len(body), n_m)
        if len(times) < 2:
            raise ValueError("record needs at least two rows")
        dt = float(times[1] - times[0])
        return cls(dt=dt, times=times,
                   wiener=np.diff(wn, axis=0),
                   diag_jumps=np.diff(dn, axis=0).astype(np.int8),
                   coupling_jumps=np.diff(dm, axis=0).astype(np.int8))


@dataclass(frozen=True)
class ConditionalStatePath:
    """Unnormalized conditional states along a record, with the likelihood.

    The a posteriori states are the trace-normalized entries.
    """

    times: np.ndarray
    sigmas: np.ndarray   # (steps+1, n, d, d)

    def likelihood(self) -> np.ndarray:
        return np.trace(self.sigmas, axis1=-2, axis2=-1).sum(axis=-1).real

    def a_posteriori(self, k: int) -> BlockDensity:
        pg = np.trace(self.sigmas[k], axis1=-2, axis2=-1).sum().real
        return BlockDensity(self.sigmas[k] / pg, normalized=True)


@dataclass(frozen=True)
class APosterioriPath:
    times: np.ndarray
    rhos: np.ndarray     # (steps+1, n, d, d), unit total trace

    def state_at(self, k: int) -> BlockDensity:
        return BlockDensity(self.rhos[k], normalized=True)


@dataclass(frozen=True)
class LinearFilteringRun:
    """One reference-law filtering simulation: record plus endpoint data."""

    times: np.ndarray
    record: ObservedRecord
    sigma_final: np.ndarray
    likelihood_path: np.ndarray
    path: ConditionalStatePath | None = None


@dataclass(frozen=True)
class NonlinearFilteringRun:
    times: np.ndarray
    record: ObservedRecord
    rho_final: np.ndarray
    path: APosterioriPath | None = None


class SMEData:
    """Precomputed arrays for the filtering steppers of one model."""

    def __init__(self, model: RateModel):
        require_valid(model)
        self.model = model
        self.gen_matrix = generator_matrix(model)
        obs = model.observed
        self.n_obs_w = obs.diffusive
        self.diff_ops = [model.diag_channels[a].op.blocks for a in range(self.n_obs_w)]
        self.diff_mods = [model.diag_channels[a].modulation for a in range(self.n_obs_w)]
        self.obs_diag = []
        for a in range(model.d1, obs.diagonal):
            ch = model.diag_channels[a]
            L = ch.op.blocks
            LdL = np.einsum("jba,jbc->jac", L.conj(), L)
            self.obs_diag.append((L, LdL, float(ch.intensity)))
        self.obs_coup = []
        for a in range(model.d2, obs.coupling):
            ch = model.coupling_channels[a]
            R = ch.op.blocks
            loss = np.einsum("jkba,jkbc->kac", R.conj(), R)  # per source band
            self.obs_coup.append((R, loss, float(sum(ch.intensities))))
        self.n_obs_diag = len(self.obs_diag)
        self.n_obs_coup = len(self.obs_coup)

    def diag_phases(self, t: float) -> np.ndarray:
        out = np.ones((self.n_obs_w, self.model.n), dtype=complex)
        for a, mod in enumerate(self.diff_mods):
            if mod is not None:
                if mod.freq is not None:
                    out[a] = np.exp(1j * mod.freq * t)
                else:
                    out[a] = np.asarray(mod.factors(t))
        return out

    def deterministic_part(self, X: np.ndarray) -> np.ndarray:
        """Apply the rate generator to a batch (C, n, d, d)."""
        C = X.shape[0]
        flat = X.reshape(C, -1)
        return (flat @ self.gen_matrix.T).reshape(X.shape)


def _coupling_gain(R: np.ndarray, X: np.ndarray) -> np.ndarray:
    """sum_k R[j,k] X_k R[j,k]^dagger into band j, batched over C."""
    n = R.shape[0]
    out = np.zeros_like(X)
    for j in range(n):
        for k in range(n):
            Rjk = R[j, k]
            out[:, j] += Rjk @ X[:, k] @ Rjk.conj().T
    return out


def linear_sme_step_batch(data: SMEData, sigma: np.ndarray, t: float, dt: float,
                          dW: np.ndarray, dN: np.ndarray, dM: np.ndarray) -> np.ndarray:
    """One Euler step of the unnormalized filtering equation.

    All stochastic coefficients are evaluated at the pre-step state;
    observed counting channels enter through compensated increments.
    """
    out = sigma + dt * data.deterministic_part(sigma)
    phases = data.diag_phases(t)
    for a in range(data.n_obs_w):
        L = data.diff_ops[a]
        Lt = phases[a][:, None, None] * L
        term = Lt @ sigma + sigma @ np.conj(np.swapaxes(Lt, -1, -2))
        out += term * dW[:, a, None, None, None]
    for a, (L, _, lam) in enumerate(data.obs_diag):
        gain = (L @ sigma) @ np.conj(np.swapaxes(L, -1, -2))
        term = gain / lam - sigma
        out += term * (dN[:, a] - lam * dt)[:, None, None, None]
    for a, (R, _, Lam) in enumerate(data.obs_coup):
        term = _coupling_gain(R, sigma) / Lam - sigma
        out += term * (dM[:, a] - Lam * dt)[:, None, None, None]
    return out


def conditional_signals(data: SMEData, rho: np.ndarray, t: float):
    """Conditional quadrature means and jump intensities at the given state.

    Returns (m, J1, J2) with shapes (C, n_obs_w), (C, n_obs_diag),
    (C, n_obs_coup).  These define the physical law of the observed
    record increments at the pre-step state.
    """
    C = rho.shape[0]
    phases = data.diag_phases(t)
    m = np.empty((C, data.n_obs_w))
    for a in range(data.n_obs_w):
        Lt = phases[a][:, None, None] * data.diff_ops[a]
        m[:, a] = 2.0 * np.trace(Lt @ rho, axis1=-2, axis2=-1).sum(axis=-1).real
    J1 = np.empty((C, data.n_obs_diag))
    for a, (_, LdL, _) in enumerate(data.obs_diag):
        J1[:, a] = np.trace(LdL @ rho, axis1=-2, axis2=-1).sum(axis=-1).real
    J2 = np.empty((C, data.n_obs_coup))
    for a, (_, loss, _) in enumerate(data.obs_coup):
        J2[:, a] = np.trace(loss @ rho, axis1=-2, axis2=-1).sum(axis=-1).real
    return m, J1, J2


def nonlinear_sme_step_batch(data: SMEData, rho: np.ndarray, t: float, dt: float,
                             dW_hat: np.ndarray, dN: np.ndarray, dM: np.ndarray,
                             renormalize: bool = True, signals=None):
    """One Euler step of the normalized filtering equation.

    Returns (rho_new, m, J1, J2) with the conditional signals evaluated
    at the pre-step state (reused from ``signals`` when supplied).
    """
    if signals is None:
        signals = conditional_signals(data, rho, t)
    m, J1, J2 = signals
    out = rho + dt * data.deterministic_part(rho)
    phases = data.diag_phases(t)
    for a in range(data.n_obs_w):
        L = data.diff_ops[a]
        Lt = phases[a][:, None, None] * L
        term = Lt @ rho + rho @ np.conj(np.swapaxes(Lt, -1, -2)) - m[:, a, None, None, None] * rho
        out += term * dW_hat[:, a, None, None, None]

    for a, (L, _, _) in enumerate(data.obs_diag):
        hit = dN[:, a] != 0
        if hit.any() and np.any(J1[hit, a] < INTENSITY_FLOOR):
            raise ThinningError(f"observed diagonal counter {a} fired at zero intensity")
        gain = (L @ rho) @ np.conj(np.swapaxes(L, -1, -2))
        term = gain / np.where(J1[:, a] > 0, J1[:, a], 1.0)[:, None, None, None] - rho
        out += term * (dN[:, a] - J1[:, a] * dt)[:, None, None, None]

    for a, (R, _, _) in enumerate(data.obs_coup):
        hit = dM[:, a] != 0
        if hit.any() and np.any(J2[hit, a] < INTENSITY_FLOOR):
            raise ThinningError(f"observed summed counter {a} fired at zero intensity")
        term = _coupling_gain(R, rho) / np.where(
            J2[:, a] > 0, J2[:, a], 1.0)[:, None, None, None] - rho
        out += term * (dM[:, a] - J2[:, a] * dt)[:, None, None, None]

    if renormalize:
        tr = np.trace(out, axis1=-2, axis2=-1).sum(axis=-1).real
        out = out / tr[:, None, None, None]
    return out, m, J1, J2


def step_linear_sme(model: RateModel, sigma: BlockDensity, t: float, dt: float,
                    wiener, diag_jumps=(), coupling_jumps=(),
                    data: SMEData | None = None) -> BlockDensity:
    """Single-state wrapper around the batched linear filtering step."""
    if data is None:
        data = SMEData(model)
    out = linear_sme_step_batch(
        data, sigma.blocks[None], t, dt,
        np.asarray(wiener, dtype=float).reshape(1, -1),
        np.asarray(diag_jumps, dtype=float).reshape(1, -1),
        np.asarray(coupling_jumps, dtype=float).reshape(1, -1))
    return BlockDensity(out[0])


def step_nonlinear_sme(model: RateModel, rho: BlockDensity, t: float, dt: float,
                       innovations, diag_jumps=(), coupling_jumps=(),
                       data: SMEData | None = None,
                       renormalize: bool = True) -> BlockDensity:
    """Single-state wrapper around the batched normalized filtering step."""
    if data is None:
        data = SMEData(model)
    out, _, _, _ = nonlinear_sme_step_batch(
        data, rho.blocks[None], t, dt,
        np.asarray(innovations, dtype=float).reshape(1, -1),
        np.asarray(diag_jumps, dtype=float).reshape(1, -1),
        np.asarray(coupling_jumps, dtype=float).reshape(1, -1),
        renormalize=renormalize)
    return BlockDensity(out[0], normalized=renormalize)


# ---------------------------------------------------------------------------
# Simulation, replay, instruments
# ---------------------------------------------------------------------------

def _draw_record_noise(data: SMEData, rng, n_steps: int, dt: float):
    normals, uniforms = streams.draw_path_noise(
        rng, n_steps, data.n_obs_w, data.n_obs_diag + data.n_obs_coup, dt)
    return normals, uniforms


def simulate_linear_sme(model: RateModel, sigma0: BlockDensity, horizon: float,
                        dt: float, master_seed: int = 0, index: int = 0,
                        store_path: bool = False,
                        data: SMEData | None = None) -> LinearFilteringRun:
    """Simulate the filtering equation under the reference law.

    Observed Wiener outputs are standard Wiener increments and observed
    counters fire at their constant reference intensities; the total
    trace of the conditional state accumulates the likelihood.
    """
    if data is None:
        data = SMEData(model)
    n_steps = streams.step_count(horizon, dt)
    rng = streams.trajectory_rng(master_seed, index)
    normals, uniforms = _draw_record_noise(data, rng, n_steps, dt)
    rates = np.array([lam for (_, _, lam) in data.obs_diag]
                     + [Lam for (_, _, Lam) in data.obs_coup])
    jumps = (uniforms < -np.expm1(-rates * dt)[None, :]).astype(np.int8) \
        if rates.size else np.zeros((n_steps, 0), dtype=np.int8)
    dN = jumps[:, :data.n_obs_diag]
    dM = jumps[:, data.n_obs_diag:]
    times = np.arange(n_steps + 1) * dt

    sig = sigma0.blocks[None].astype(complex)
    pG = np.empty(n_steps + 1)
    pG[0] = np.trace(sig[0], axis1=-2, axis2=-1).sum().real
    path = np.empty((n_steps + 1,) + sig.shape[1:], dtype=complex) if store_path else None
    if store_path:
        path[0] = sig[0]
    for k in range(n_steps):
        sig = linear_sme_step_batch(data, sig, k * dt, dt, normals[k][None],
                                    dN[k][None].astype(float), dM[k][None].astype(float))
        pG[k + 1] = np.trace(sig[0], axis1=-2, axis2=-1).sum().real
        if store_path:
            path[k + 1] = sig[0]

    record = ObservedRecord(dt=dt, times=times, wiener=normals,
                            diag_jumps=dN, coupling_jumps=dM)
    return LinearFilteringRun(
        times=times, record=record, sigma_final=sig[0], likelihood_path=pG,
        path=ConditionalStatePath(times, path) if store_path else None)


def simulate_linear_sme_ensemble(model: RateModel, sigma0: BlockDensity,
                                 horizon: float, dt: float, master_seed: int,
                                 n_runs: int,
                                 chunk_size: int = streams.DEFAULT_CHUNK) -> list[LinearFilteringRun]:
    """Independent reference-law filtering runs, stepped in batches.

    Run i always consumes the stream keyed by (master_seed, i), so the
    result list does not depend on the chunk size.
    """
    data = SMEData(model)
    n_steps = streams.step_count(horizon, dt)
    times = np.arange(n_steps + 1) * dt
    rates = np.array([lam for (_, _, lam) in data.obs_diag]
                     + [Lam for (_, _, Lam) in data.obs_coup])
    n_jump = data.n_obs_diag + data.n_obs_coup
    out: list[LinearFilteringRun] = []
    for start, stop in streams.chunk_ranges(n_runs, chunk_size):
        C = stop - start
        normals = np.empty((C, n_steps, data.n_obs_w))
        uniforms = np.empty((C, n_steps, n_jump))
        for c, i in enumerate(range(start, stop)):
            rng = streams.trajectory_rng(master_seed, i)
            normals[c], uniforms[c] = streams.draw_path_noise(
                rng, n_steps, data.n_obs_w, n_jump, dt)
        jumps = (uniforms < -np.expm1(-rates * dt)[None, None, :]).astype(np.int8) \
            if rates.size else np.zeros((C, n_steps, 0), dtype=np.int8)
        dN = jumps[:, :, :data.n_obs_diag]
        dM = jumps[:, :, data.n_obs_diag:]

        sig = np.broadcast_to(sigma0.blocks, (C,) + sigma0.blocks.shape).astype(complex)
        pG = np.empty((C, n_steps + 1))
        pG[:, 0] = np.trace(sig, axis1=-2, axis2=-1).sum(axis=-1).real
        for k in range(n_steps):
            sig = linear_sme_step_batch(data, sig, k * dt, dt, normals[:, k],
                                        dN[:, k].astype(float), dM[:, k].astype(float))
            pG[:, k + 1] = np.trace(sig, axis1=-2, axis2=-1).sum(axis=-1).real

        for c in range(C):
            record = ObservedRecord(dt=dt, times=times, wiener=normals[c],
                                    diag_jumps=dN[c], coupling_jumps=dM[c])
            out.append(LinearFilteringRun(
                times=times, record=record, sigma_final=sig[c],
                likelihood_path=pG[c]))
    return out


def simulate_nonlinear_sme(model: RateModel, rho0: BlockDensity, horizon: float,
                           dt: float, master_seed: int = 0, index: int = 0,
                           store_path: bool = False,
                           data: SMEData | None = None) -> NonlinearFilteringRun:
    """Simulate the normalized filtering equation under the physical law.

    Innovations are drawn as Wiener increments; counters are thinned
    against the conditional intensities.  The observable record is
    reconstructed on the fly (output increment = innovation plus
    conditional mean times dt).
    """
    if data is None:
        data = SMEData(model)
    n_steps = streams.step_count(horizon, dt)
    rng = streams.trajectory_rng(master_seed, index)
    normals, uniforms = _draw_record_noise(data, rng, n_steps, dt)
    times = np.arange(n_steps + 1) * dt

    rho = rho0.blocks[None].astype(complex)
    out_w = np.empty((n_steps, data.n_obs_w))
    dN = np.zeros((n_steps, data.n_obs_diag), dtype=np.int8)
    dM = np.zeros((n_steps, data.n_obs_coup), dtype=np.int8)
    path = np.empty((n_steps + 1,) + rho.shape[1:], dtype=complex) if store_path else None
    if store_path:
        path[0] = rho[0]

    for k in range(n_steps):
        # intensities at the pre-step state decide the jump thinning
        sig = conditional_signals(data, rho, k * dt)
        m_pre, J1_pre, J2_pre = sig
        u = uniforms[k]
        dn = (u[:data.n_obs_diag] < -np.expm1(-J1_pre[0] * dt)).astype(float)
        dm = (u[data.n_obs_diag:] < -np.expm1(-J2_pre[0] * dt)).astype(float)
        rho, m, _, _ = nonlinear_sme_step_batch(
            data, rho, k * dt, dt, normals[k][None], dn[None], dm[None], signals=sig)
        out_w[k] = normals[k] + m[0] * dt
        dN[k] = dn
        dM[k] = dm
        if store_path:
            path[k + 1] = rho[0]

    record = ObservedRecord(dt=dt, times=times, wiener=out_w,
                            diag_jumps=dN, coupling_jumps=dM)
    return NonlinearFilteringRun(
        times=times, record=record, rho_final=rho[0],
        path=APosterioriPath(times, path) if store_path else None)


def replay_linear_sme(model: RateModel, sigma0: BlockDensity,
                      record: ObservedRecord) -> ConditionalStatePath:
    """Deterministically refilter a stored record with the linear equation."""
    data = SMEData(model)
    n_steps = record.wiener.shape[0]
    sig = sigma0.blocks[None].astype(complex)
    path = np.empty((n_steps + 1,) + sig.shape[1:], dtype=complex)
    path[0] = sig[0]
    for k in range(n_steps):
        sig = linear_sme_step_batch(
            data, sig, record.times[k], record.dt, record.wiener[k][None],
            record.diag_jumps[k][None].astype(float),
            record.coupling_jumps[k][None].astype(float))
        path[k + 1] = sig[0]
    return ConditionalStatePath(record.times, path)


def replay_nonlinear_sme(model: RateModel, rho0: BlockDensity,
                         record: ObservedRecord) -> APosterioriPath:
    """Deterministically refilter a stored record with the normalized equation.

    The innovation increments are extracted step by step: output
    increment minus the filter's own conditional mean times dt.
    """
    data = SMEData(model)
    n_steps = record.wiener.shape[0]
    rho = rho0.blocks[None].astype(complex)
    path = np.empty((n_steps + 1,) + rho.shape[1:], dtype=complex)
    path[0] = rho[0]
    for k in range(n_steps):
        t = record.times[k]
        sig = conditional_signals(data, rho, t)
        innov = record.wiener[k][None] - sig[0] * record.dt
        rho, _, _, _ = nonlinear_sme_step_batch(
            data, rho, t, record.dt, innov,
            record.diag_jumps[k][None].astype(float),
            record.coupling_jumps[k][None].astype(float), signals=sig)
        path[k + 1] = rho[0]
    return APosterioriPath(record.times, path)


@dataclass
class InstrumentEstimate:
    """Monte Carlo estimate of an instrument value on an event.

    blocks holds the estimated (unnormalized) conditional operator;
    probability is the estimated physical probability of the event.
    """

    blocks: np.ndarray
    entry_stderr: np.ndarray
    probability: float
    probability_stderr: float
    n_runs: int


def instrument_statistic(runs: list[LinearFilteringRun],
                         event=None) -> InstrumentEstimate:
    """Estimate the instrument applied to the initial state on an event.

    event is a predicate over LinearFilteringRun (None means the sure
    event); the estimate is the reference-law average of the indicator
    times the unnormalized conditional state, whose total trace
    estimates the physical probability of the event.
    """
    if not runs:
        raise ValueError("no runs supplied")
    samples = np.stack([
        (r.sigma_final if event is None or event(r) else np.zeros_like(r.sigma_final))
        for r in runs])
    N = len(runs)
    mean = samples.mean(axis=0)
    var = (samples.real.var(axis=0) + samples.imag.var(axis=0)) / N
    probs = np.trace(samples, axis1=-2, axis2=-1).sum(axis=-1).real
    return InstrumentEstimate(
        blocks=mean,
        entry_stderr=np.sqrt(var),
        probability=float(probs.mean()),
        probability_stderr=float(probs.std(ddof=1) / np.sqrt(N)),
        n_runs=N,
    )
