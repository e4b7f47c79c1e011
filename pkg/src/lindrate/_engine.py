"""Shared batch-stepping kernels for the wave-function equations.

States are batched as (C, n, d) complex arrays (C trajectories).  All
increments of one Euler step are evaluated at the pre-step state; jump
replacements therefore enter additively, which coincides with the
replacement picture to the scheme's accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import AssembledGenerators, RateModel, assemble

# Norms below this are treated as the absorbed-at-zero state; the
# normalized process then uses the fixed fallback vector.
ZERO_NORM2 = 1e-280

# A jump firing while its physical intensity sits below this signals a
# broken thinning step, not randomness.
INTENSITY_FLOOR = 1e-14


class ThinningError(RuntimeError):
    """A state-dependent jump fired on an intensity that is numerically zero."""


@dataclass(frozen=True)
class _JumpChannel:
    label: tuple
    mats: np.ndarray        # (n, d, d): diagonal op, or coupling column
    source: int | None      # source band for coupling channels
    rate: float             # reference intensity under Q


class StepperData:
    """Precomputed arrays driving the batch kernels for one model."""

    def __init__(self, model: RateModel, asm: AssembledGenerators | None = None):
        self.model = model
        self.asm = asm if asm is not None else assemble(model)
        self.n, self.d = model.n, model.d
        self.d1 = model.d1
        self.n_wiener = model.wiener_count
        self.n_jump = model.jump_count
        self.drift_mats = self.asm.drift_mats
        self.lam_total = self.asm.jump_rate_total

        self.diag_diff = [model.diag_channels[a].op.blocks for a in range(model.d1)]
        self.diag_mods = [model.diag_channels[a].modulation for a in range(model.d1)]
        # diffusive coupling columns, flattened channel-major over source bands
        self.coup_diff: list[tuple[np.ndarray, int]] = []
        for a in range(model.d2):
            R = model.coupling_channels[a].op.blocks
            for k in range(model.n):
                self.coup_diff.append((R[:, k], k))

        self.jump_channels: list[_JumpChannel] = []
        for a in range(model.d1, model.m1):
            ch = model.diag_channels[a]
            self.jump_channels.append(_JumpChannel(
                label=("diag", a), mats=ch.op.blocks, source=None,
                rate=float(ch.intensity)))
        for a in range(model.d2, model.m2):
            ch = model.coupling_channels[a]
            for k in range(model.n):
                self.jump_channels.append(_JumpChannel(
                    label=("coup", a, k), mats=ch.op.blocks[:, k], source=k,
                    rate=float(ch.intensities[k])))
        self.jump_rates = np.array([c.rate for c in self.jump_channels])
        # Q-law per-step firing probabilities are 1 - exp(-rate dt)

    def diag_phases(self, t: float) -> np.ndarray:
        """(d1, n) unit-modulus multipliers at time t."""
        out = np.ones((self.d1, self.n), dtype=complex)
        for a, mod in enumerate(self.diag_mods):
            if mod is not None:
                if mod.freq is not None:
                    out[a] = np.exp(1j * mod.freq * t)
                else:
                    out[a] = np.asarray(mod.factors(t))
        return out


def apply_diag(mats: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """(n,d,d) block operator on a batch (C,n,d) -> (C,n,d)."""
    return (mats @ Z[..., None])[..., 0]


def apply_coupling_col(col_mats: np.ndarray, Z_source: np.ndarray) -> np.ndarray:
    """Column of a coupling family on the source band: (n,d,d),(C,d)->(C,n,d)."""
    return (col_mats @ Z_source[:, None, :, None])[..., 0]


def batch_norm2(Z: np.ndarray) -> np.ndarray:
    return np.einsum("cjd,cjd->c", Z.conj(), Z).real


def fallback_states(n: int, d: int, count: int) -> np.ndarray:
    """The fixed unit vector used when the unnormalized state hits zero."""
    psi = np.zeros((count, n, d), dtype=complex)
    psi[:, :, 0] = 1.0 / np.sqrt(n)
    return psi


def normalized_states(Z: np.ndarray) -> np.ndarray:
    """Z / ||Z|| batchwise, with the fixed fallback on absorbed states."""
    p = batch_norm2(Z)
    dead = p < ZERO_NORM2
    safe = np.where(dead, 1.0, p)
    psi = Z / np.sqrt(safe)[:, None, None]
    if dead.any():
        psi[dead] = fallback_states(Z.shape[1], Z.shape[2], int(dead.sum()))
    return psi


def signals(data: StepperData, psi: np.ndarray, t: float):
    """Quadrature signals and jump intensities of a normalized batch.

    Returns (v, intensities, diff_applied, jump_applied): v has shape
    (C, n_wiener), intensities (C, n_jump); the applied arrays are the
    channel operators acting on psi, reused by drift and noise terms.
    """
    C = psi.shape[0]
    v = np.zeros((C, data.n_wiener))
    diff_applied = []
    phases = data.diag_phases(t)
    for a in range(data.d1):
        Lpsi = apply_diag(data.diag_diff[a], psi) * phases[a][None, :, None]
        diff_applied.append(Lpsi)
        v[:, a] = 2.0 * np.einsum("cjd,cjd->c", psi.conj(), Lpsi).real
    for w, (col, k) in enumerate(data.coup_diff):
        Spsi = apply_coupling_col(col, psi[:, k])
        diff_applied.append(Spsi)
        v[:, data.d1 + w] = 2.0 * np.einsum("cjd,cjd->c", psi.conj(), Spsi).real

    intensities = np.zeros((C, data.n_jump))
    jump_applied = []
    for q, ch in enumerate(data.jump_channels):
        if ch.source is None:
            applied = apply_diag(ch.mats, psi)
        else:
            applied = apply_coupling_col(ch.mats, psi[:, ch.source])
        jump_applied.append(applied)
        intensities[:, q] = batch_norm2(applied)
    return v, intensities, diff_applied, jump_applied


def linear_step(data: StepperData, Z: np.ndarray, t: float, dt: float,
                dW: np.ndarray, jumps: np.ndarray) -> np.ndarray:
    """One Euler step of the likelihood-carrying linear equation.

    dW: (C, n_wiener) Wiener increments; jumps: (C, n_jump) 0/1
    indicators drawn under the reference law.  A firing channel replaces
    the whole state from the pre-step left limit (the O(dt) continuous
    increments of that step are dominated by the O(1) replacement);
    replacement keeps absorption exact: a zero replacement stays zero.
    """
    out = Z + dt * (apply_diag(data.drift_mats, Z) + 0.5 * data.lam_total * Z)
    phases = data.diag_phases(t)
    for a in range(data.d1):
        LZ = apply_diag(data.diag_diff[a], Z) * phases[a][None, :, None]
        out += LZ * dW[:, a, None, None]
    for w, (col, k) in enumerate(data.coup_diff):
        SZ = apply_coupling_col(col, Z[:, k])
        out += SZ * dW[:, data.d1 + w, None, None]

    jumped = jumps.astype(bool)
    any_fire = jumped.any(axis=1)
    if any_fire.any():
        Zr = Z.copy()
        for q, ch in enumerate(data.jump_channels):
            fired = jumped[:, q]
            if ch.rate == 0.0 or not fired.any():
                continue
            if ch.source is None:
                applied = apply_diag(ch.mats, Zr)
            else:
                applied = apply_coupling_col(ch.mats, Zr[:, ch.source])
            Zr = np.where(fired[:, None, None], applied / np.sqrt(ch.rate), Zr)
        out = np.where(any_fire[:, None, None], Zr, out)
    return out


def physical_step(data: StepperData, psi: np.ndarray, t: float, dt: float,
                  dW_hat: np.ndarray, uniforms: np.ndarray,
                  renormalize: bool = True):
    """One Euler step of the normalized equation under the physical law.

    Jumps are drawn by thinning the supplied uniforms against the
    state-dependent intensities at the pre-step state.  Returns
    (new_state, v, intensities, fired).
    """
    v, intensities, diff_applied, jump_applied = signals(data, psi, t)

    total_I = intensities.sum(axis=1)
    drift = apply_diag(data.drift_mats, psi) + 0.5 * total_I[:, None, None] * psi
    for w in range(data.n_wiener):
        vw = v[:, w, None, None]
        drift += 0.5 * vw * (diff_applied[w] - 0.25 * vw * psi)

    out = psi + drift * dt
    for w in range(data.n_wiener):
        vw = v[:, w, None, None]
        out += (diff_applied[w] - 0.5 * vw * psi) * dW_hat[:, w, None, None]

    # thinning against the pre-step intensities; a firing channel
    # replaces the state from the left limit (normalized by its norm)
    fired = np.zeros_like(intensities, dtype=bool)
    for q in range(data.n_jump):
        I_q = intensities[:, q]
        hit = uniforms[:, q] < -np.expm1(-I_q * dt)
        if hit.any():
            if np.any(I_q[hit] < INTENSITY_FLOOR):
                raise ThinningError(
                    f"jump channel {data.jump_channels[q].label} fired at intensity "
                    f"{I_q[hit].min():.3e}")
            fired[:, q] = hit
    any_fire = fired.any(axis=1)
    if any_fire.any():
        Zr = psi.copy()
        for q, ch in enumerate(data.jump_channels):
            hit = fired[:, q]
            if not hit.any():
                continue
            if ch.source is None:
                applied = apply_diag(ch.mats, Zr)
            else:
                applied = apply_coupling_col(ch.mats, Zr[:, ch.source])
            nrm2 = batch_norm2(applied)
            if np.any(nrm2[hit] < INTENSITY_FLOOR):
                raise ThinningError(
                    f"jump channel {ch.label} annihilated the state it replaced")
            repl = applied / np.sqrt(np.where(nrm2 > 0, nrm2, 1.0))[:, None, None]
            Zr = np.where(hit[:, None, None], repl, Zr)
        out = np.where(any_fire[:, None, None], Zr, out)

    if renormalize:
        out = normalized_states(out)
    return out, v, intensities, fired
