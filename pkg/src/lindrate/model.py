"""Rate-model declaration and assembly of the derived generators.

A :class:`RateModel` declares the band Hamiltonians, the diagonal
(band-preserving) channels, the coupling (band-changing) channels, the
reference jump intensities and the observed-output cutoffs.  From it we
assemble the drift matrices, the extended-space operator families and
the three generators used throughout:

* ``rate_generator``      - bandwise generator of the rate equation,
* ``extended_generator``  - Lindblad generator on the full (n d)-space
                            built from the summed operator families,
* ``tilde_generator``     - Lindblad generator with one operator per
                            (band pair, channel); agrees with the
                            extended one on the diagonal blocks.

Channel ordering convention: within the diagonal list the first ``d1``
channels are diffusive and the rest drive jumps; within the coupling
list the first ``d2`` are diffusive.  Flattened noise indices follow
this order, coupling channels enumerating source bands fastest.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .blockalg import BlockDensity, BlockOperator, CouplingOperator

try:
    import tomllib as _toml
except ModuleNotFoundError:  # Python < 3.11
    import tomli as _toml

SIGMA_MINUS = np.array([[0.0, 0.0], [1.0, 0.0]], dtype=complex)
SIGMA_PLUS = np.array([[0.0, 1.0], [0.0, 0.0]], dtype=complex)
SIGMA_Z = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)
PROJ_EXCITED = SIGMA_PLUS @ SIGMA_MINUS
PROJ_GROUND = SIGMA_MINUS @ SIGMA_PLUS

_NAMED_OPS = {
    "sigma_minus": SIGMA_MINUS,
    "sigma_plus": SIGMA_PLUS,
    "sigma_z": SIGMA_Z,
    "proj_excited": PROJ_EXCITED,
    "proj_ground": PROJ_GROUND,
    "zero": np.zeros((2, 2), dtype=complex),
}


def identity(d: int) -> np.ndarray:
    return np.eye(d, dtype=complex)


class ModelFileError(ValueError):
    """Raised when a model file cannot be parsed or fails its schema."""


@dataclass(frozen=True)
class PhaseModulation:
    """Unit-modulus time modulation of a diffusive diagonal channel.

    ``factors(t)`` returns the per-band complex multipliers applied to
    the base operators at time t.  The local-oscillator form exp(i f t)
    is the one concrete case used; ``freq`` is set then and lets
    stepping code evaluate phases without the callable.
    """

    factors: Callable[[float], np.ndarray]
    freq: float | None = None

    @classmethod
    def local_oscillator(cls, freq: float, n: int) -> "PhaseModulation":
        f = float(freq)

        def factors(t: float) -> np.ndarray:
            return np.full(n, np.exp(1j * f * t))

        return cls(factors=factors, freq=f)


@dataclass(frozen=True)
class DiagonalChannel:
    """One band-preserving channel: a BlockOperator, optionally modulated.

    Diffusive channels (the first d1) may carry a phase modulation and
    have ``intensity`` None; jump channels carry the reference Poisson
    intensity and no modulation.
    """

    op: BlockOperator
    modulation: PhaseModulation | None = None
    intensity: float | None = None


@dataclass(frozen=True)
class CouplingChannel:
    """One band-changing channel.

    ``intensities[j]`` is the reference intensity of the jump source at
    band j (jump channels only; diffusive coupling channels keep None).
    """

    op: CouplingOperator
    intensities: tuple[float, ...] | None = None


@dataclass(frozen=True)
class ObservedCutoffs:
    """Which outputs are observed (cutoffs in the channel orderings).

    diffusive: observed Wiener outputs are the diagonal diffusive
        channels with index < diffusive.
    diagonal:  observed counting outputs among diagonal jump channels
        are those with index < diagonal (so ``diagonal <= d1`` means
        none).
    coupling:  observed summed counting outputs among coupling jump
        channels are those with index < coupling (``coupling <= d2``
        means none).  Only the band-summed counts are ever observable.
    """

    diffusive: int = 0
    diagonal: int = 0
    coupling: int = 0


@dataclass(frozen=True)
class RateModel:
    n: int
    d: int
    hamiltonian: BlockOperator
    diag_channels: tuple[DiagonalChannel, ...]
    coupling_channels: tuple[CouplingChannel, ...]
    d1: int
    d2: int
    observed: ObservedCutoffs = ObservedCutoffs()

    def __post_init__(self):
        object.__setattr__(self, "diag_channels", tuple(self.diag_channels))
        object.__setattr__(self, "coupling_channels", tuple(self.coupling_channels))

    @property
    def m1(self) -> int:
        return len(self.diag_channels)

    @property
    def m2(self) -> int:
        return len(self.coupling_channels)

    @property
    def wiener_count(self) -> int:
        """Number of Wiener drivers: d1 diagonal plus d2 * n coupling."""
        return self.d1 + self.d2 * self.n

    @property
    def jump_count(self) -> int:
        """Number of Poisson drivers: (m1 - d1) plus (m2 - d2) * n."""
        return (self.m1 - self.d1) + (self.m2 - self.d2) * self.n

    def jump_labels(self) -> list[tuple]:
        """Flattened jump-channel labels: ('diag', a) or ('coup', a, k)."""
        labels: list[tuple] = []
        for a in range(self.d1, self.m1):
            labels.append(("diag", a))
        for a in range(self.d2, self.m2):
            for k in range(self.n):
                labels.append(("coup", a, k))
        return labels

    def jump_rates(self) -> np.ndarray:
        """Reference intensities for the flattened jump channels."""
        rates = [self.diag_channels[a].intensity for a in range(self.d1, self.m1)]
        for a in range(self.d2, self.m2):
            rates.extend(self.coupling_channels[a].intensities)
        return np.asarray(rates, dtype=float)


def validate(model: RateModel) -> list[str]:
    """Check the declaration against its structural assumptions.

    Returns one diagnostic string per violation; an empty list means the
    model is usable.
    """
    out: list[str] = []
    n, d = model.n, model.d
    H = model.hamiltonian.blocks
    if H.shape != (n, d, d):
        out.append(f"hamiltonian has shape {H.shape}, expected {(n, d, d)}")
    else:
        for i in range(n):
            gap = np.max(np.abs(H[i] - H[i].conj().T))
            if gap > 1e-12:
                out.append(f"hamiltonian block {i} is not hermitian (gap {gap:.3e})")

    if not 0 <= model.d1 <= model.m1:
        out.append(f"d1={model.d1} outside [0, m1={model.m1}]")
    if not 0 <= model.d2 <= model.m2:
        out.append(f"d2={model.d2} outside [0, m2={model.m2}]")

    for a, ch in enumerate(model.diag_channels):
        if ch.op.blocks.shape != (n, d, d):
            out.append(f"diagonal channel {a} has shape {ch.op.blocks.shape}")
            continue
        if a < model.d1:
            if ch.intensity is not None:
                out.append(f"diffusive diagonal channel {a} carries an intensity")
            if ch.modulation is not None:
                for t in (0.0, 0.37, 1.13):
                    f = np.asarray(ch.modulation.factors(t))
                    if f.shape != (n,) or np.max(np.abs(np.abs(f) - 1.0)) > 1e-12:
                        out.append(
                            f"diagonal channel {a}: modulation not unit-modulus at t={t}")
                        break
        else:
            if ch.modulation is not None:
                out.append(f"jump diagonal channel {a} must not be modulated")
            if ch.intensity is None or not ch.intensity > 0:
                out.append(f"jump diagonal channel {a} needs intensity > 0")

    for a, ch in enumerate(model.coupling_channels):
        if ch.op.blocks.shape != (n, n, d, d):
            out.append(f"coupling channel {a} has shape {ch.op.blocks.shape}")
            continue
        if a < model.d2:
            if ch.intensities is not None:
                out.append(f"diffusive coupling channel {a} carries intensities")
        else:
            lam = ch.intensities
            if lam is None or len(lam) != n:
                out.append(f"jump coupling channel {a} needs {n} intensities")
                continue
            for k in range(n):
                col_zero = np.max(np.abs(ch.op.blocks[:, k])) == 0.0
                if lam[k] < 0:
                    out.append(f"coupling channel {a}, band {k}: negative intensity")
                elif lam[k] == 0 and not col_zero:
                    out.append(
                        f"coupling channel {a}, band {k}: zero intensity but "
                        "nonzero operators (zero is allowed only for dead channels)")

    obs = model.observed
    if not 0 <= obs.diffusive <= model.d1:
        out.append(f"observed.diffusive={obs.diffusive} outside [0, d1={model.d1}]")
    if not 0 <= obs.diagonal <= model.m1:
        out.append(f"observed.diagonal={obs.diagonal} outside [0, m1={model.m1}]")
    if not 0 <= obs.coupling <= model.m2:
        out.append(f"observed.coupling={obs.coupling} outside [0, m2={model.m2}]")
    return out


def require_valid(model: RateModel) -> RateModel:
    problems = validate(model)
    if problems:
        raise ValueError("invalid model: " + "; ".join(problems))
    return model


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AssembledGenerators:
    """Derived operator data shared by every propagation routine.

    drift holds the per-band drift matrices (anti-hermitian Hamiltonian
    part plus half the total decay operators); coupling_rate_sums holds
    the band-summed reference intensity of each jump coupling channel;
    jump_rate_total is the total reference jump intensity entering the
    linear-equation drift.
    """

    model: RateModel
    drift: BlockOperator
    diag_ops: tuple[BlockOperator, ...]
    coupling_ops: tuple[CouplingOperator, ...]
    coupling_rate_sums: np.ndarray
    jump_rate_total: float

    @property
    def drift_mats(self) -> np.ndarray:
        return self.drift.blocks

    def phase_factors(self, t: float) -> np.ndarray:
        """(m1, n) multipliers for the diagonal channels at time t."""
        m = self.model
        out = np.ones((m.m1, m.n), dtype=complex)
        for a in range(m.d1):
            mod = m.diag_channels[a].modulation
            if mod is not None:
                out[a] = mod.factors(t)
        return out


def assemble(model: RateModel) -> AssembledGenerators:
    n, d = model.n, model.d
    decay = np.zeros((n, d, d), dtype=complex)
    for ch in model.diag_channels:
        L = ch.op.blocks
        decay += np.einsum("jba,jbc->jac", L.conj(), L)
    for ch in model.coupling_channels:
        R = ch.op.blocks
        # band j loses through every R[k, j]
        decay += np.einsum("kjba,kjbc->jac", R.conj(), R)
    drift = -1j * model.hamiltonian.blocks - 0.5 * decay

    lam_sums = np.array(
        [sum(model.coupling_channels[a].intensities)
         for a in range(model.d2, model.m2)], dtype=float)
    lam_total = float(sum(
        model.diag_channels[a].intensity for a in range(model.d1, model.m1)
    ) + lam_sums.sum())

    return AssembledGenerators(
        model=model,
        drift=BlockOperator(drift),
        diag_ops=tuple(ch.op for ch in model.diag_channels),
        coupling_ops=tuple(ch.op for ch in model.coupling_channels),
        coupling_rate_sums=lam_sums,
        jump_rate_total=lam_total,
    )


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------

def _as_blocks(tau) -> np.ndarray:
    if isinstance(tau, BlockDensity):
        return tau.blocks
    return np.asarray(tau, dtype=complex)


def rate_generator(model: RateModel, tau) -> BlockDensity:
    """Right-hand side of the rate equation, band by band.

    Accepts a BlockDensity or a raw (n, d, d) array; the result is
    traceless in total (the dynamics preserves the total trace).
    """
    x = _as_blocks(tau)
    n, d = model.n, model.d
    if x.shape != (n, d, d):
        raise ValueError(f"state has shape {x.shape}, expected {(n, d, d)}")
    H = model.hamiltonian.blocks
    out = -1j * (np.einsum("jab,jbc->jac", H, x) - np.einsum("jab,jbc->jac", x, H))
    for ch in model.diag_channels:
        L = ch.op.blocks
        Ld = np.conj(np.swapaxes(L, -1, -2))
        LdL = np.einsum("jab,jbc->jac", Ld, L)
        out += np.einsum("jab,jbc,jcd->jad", L, x, Ld)
        out -= 0.5 * (np.einsum("jab,jbc->jac", LdL, x)
                      + np.einsum("jab,jbc->jac", x, LdL))
    for ch in model.coupling_channels:
        R = ch.op.blocks
        Rd = np.conj(np.swapaxes(R, -1, -2))
        # gain into band i from band k; loss of band j through every R[k, j]
        out += np.einsum("ikab,kbc,ikcd->iad", R, x, Rd)
        loss = np.einsum("kjba,kjbc->jac", R.conj(), R)
        out -= 0.5 * (np.einsum("jab,jbc->jac", loss, x)
                      + np.einsum("jab,jbc->jac", x, loss))
    if isinstance(tau, BlockDensity):
        return BlockDensity(out)
    return out


def _embed_diag(mats: np.ndarray, n: int, d: int) -> np.ndarray:
    """Block-diagonal embedding of per-band matrices into (n d) x (n d)."""
    full = np.zeros((n * d, n * d), dtype=complex)
    for j in range(n):
        full[j * d:(j + 1) * d, j * d:(j + 1) * d] = mats[j]
    return full


def _embed_coupling_col(R: np.ndarray, j: int, n: int, d: int) -> np.ndarray:
    """Embed the source-band-j column of a coupling family: sum_i R[i,j] (x) |i><j|."""
    full = np.zeros((n * d, n * d), dtype=complex)
    for i in range(n):
        full[i * d:(i + 1) * d, j * d:(j + 1) * d] = R[i, j]
    return full


def full_to_diag_blocks(T: np.ndarray, n: int, d: int) -> np.ndarray:
    """Extract the n diagonal d x d blocks of a full-space matrix."""
    out = np.empty((n, d, d), dtype=complex)
    for j in range(n):
        out[j] = T[j * d:(j + 1) * d, j * d:(j + 1) * d]
    return out


def diag_blocks_to_full(blocks: np.ndarray) -> np.ndarray:
    blocks = np.asarray(blocks, dtype=complex)
    return _embed_diag(blocks, blocks.shape[0], blocks.shape[1])


def _dissipator(A: np.ndarray, T: np.ndarray) -> np.ndarray:
    AdA = A.conj().T @ A
    return A @ T @ A.conj().T - 0.5 * (AdA @ T + T @ AdA)


def _lindblad_ops_extended(model: RateModel) -> list[np.ndarray]:
    """The summed operator families of the extended generator."""
    n, d = model.n, model.d
    ops = [_embed_diag(ch.op.blocks, n, d) for ch in model.diag_channels]
    for ch in model.coupling_channels:
        for j in range(n):
            ops.append(_embed_coupling_col(ch.op.blocks, j, n, d))
    return ops


def _lindblad_ops_tilde(model: RateModel) -> list[np.ndarray]:
    """One operator per (band, channel) and per (band pair, channel)."""
    n, d = model.n, model.d
    ops = []
    for ch in model.diag_channels:
        for i in range(n):
            sel = np.zeros((n, d, d), dtype=complex)
            sel[i] = ch.op.blocks[i]
            ops.append(_embed_diag(sel, n, d))
    for ch in model.coupling_channels:
        for i in range(n):
            for j in range(n):
                full = np.zeros((n * d, n * d), dtype=complex)
                full[i * d:(i + 1) * d, j * d:(j + 1) * d] = ch.op.blocks[i, j]
                ops.append(full)
    return ops


def _full_generator(model: RateModel, T: np.ndarray, ops: list[np.ndarray]) -> np.ndarray:
    n, d = model.n, model.d
    T = np.asarray(T, dtype=complex)
    if T.shape != (n * d, n * d):
        raise ValueError(f"full-space state has shape {T.shape}, expected {(n * d, n * d)}")
    H = _embed_diag(model.hamiltonian.blocks, n, d)
    out = -1j * (H @ T - T @ H)
    for A in ops:
        out += _dissipator(A, T)
    return out


def extended_generator(model: RateModel, T: np.ndarray) -> np.ndarray:
    """Lindblad generator on the full space built from the summed families."""
    return _full_generator(model, T, _lindblad_ops_extended(model))


def tilde_generator(model: RateModel, T: np.ndarray) -> np.ndarray:
    """Lindblad generator with one operator per band pair and channel.

    Used for equivalence checks only: it matches ``extended_generator``
    on the diagonal blocks but differs off the diagonal when coupling
    channels are present.
    """
    return _full_generator(model, T, _lindblad_ops_tilde(model))


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------

def _parse_matrix(value, d: int, where: str) -> np.ndarray:
    """A matrix entry: named shorthand with optional scale, or explicit rows."""
    if isinstance(value, dict):
        extra = set(value) - {"op", "scale", "matrix"}
        if extra:
            raise ModelFileError(f"{where}: unknown keys {sorted(extra)}")
        if "op" in value:
            name = value["op"]
            if name == "identity":
                base = identity(d)
            elif name in _NAMED_OPS:
                base = _NAMED_OPS[name]
            else:
                raise ModelFileError(
                    f"{where}.op: unknown operator name {name!r} "
                    f"(known: {sorted(_NAMED_OPS)} and 'identity')")
            if base.shape != (d, d):
                raise ModelFileError(f"{where}.op: {name!r} is 2x2 but d={d}")
            return complex(value.get("scale", 1.0)) * base
        if "matrix" in value:
            return _parse_matrix(value["matrix"], d, where + ".matrix")
        raise ModelFileError(f"{where}: need 'op' or 'matrix'")
    if value == "identity":
        return identity(d)
    if isinstance(value, str):
        if value not in _NAMED_OPS:
            raise ModelFileError(f"{where}: unknown operator name {value!r}")
        return _NAMED_OPS[value].copy()
    try:
        rows = [[complex(str(entry).replace(" ", "")) for entry in row] for row in value]
    except (TypeError, ValueError) as exc:
        raise ModelFileError(f"{where}: cannot parse matrix entries ({exc})") from exc
    mat = np.asarray(rows, dtype=complex)
    if mat.shape != (d, d):
        raise ModelFileError(f"{where}: matrix has shape {mat.shape}, expected {(d, d)}")
    return mat


def load_model(path) -> RateModel:
    """Load a RateModel from a TOML model file.

    See the repository README for the schema.  Syntax errors carry the
    line from the TOML parser; schema errors name the offending field.
    """
    with open(path, "rb") as fh:
        try:
            doc = _toml.load(fh)
        except _toml.TOMLDecodeError as exc:
            raise ModelFileError(f"{path}: {exc}") from exc
    return model_from_dict(doc)


def model_from_dict(doc: dict) -> RateModel:
    for key in ("n", "d", "hamiltonian", "channels"):
        if key not in doc:
            raise ModelFileError(f"missing top-level field {key!r}")
    n, d = int(doc["n"]), int(doc["d"])
    if n < 1 or d < 1:
        raise ModelFileError("fields 'n' and 'd' must be positive")

    ham = doc["hamiltonian"]
    if not isinstance(ham, Sequence) or len(ham) != n:
        raise ModelFileError(f"hamiltonian: expected a list of {n} matrices")
    H = np.stack([_parse_matrix(hb, d, f"hamiltonian[{i}]") for i, hb in enumerate(ham)])

    diag_diff: list[DiagonalChannel] = []
    diag_jump: list[DiagonalChannel] = []
    coup_diff: list[CouplingChannel] = []
    coup_jump: list[CouplingChannel] = []
    for idx, ch in enumerate(doc["channels"]):
        where = f"channels[{idx}]"
        kind = ch.get("kind")
        if kind in ("diffusive-diagonal", "jump-diagonal"):
            blocks = ch.get("blocks")
            if not isinstance(blocks, Sequence) or len(blocks) != n:
                raise ModelFileError(f"{where}.blocks: expected a list of {n} matrices")
            op = BlockOperator(np.stack(
                [_parse_matrix(b, d, f"{where}.blocks[{j}]") for j, b in enumerate(blocks)]))
            if kind == "diffusive-diagonal":
                mod = None
                if "modulation_freq" in ch:
                    mod = PhaseModulation.local_oscillator(float(ch["modulation_freq"]), n)
                diag_diff.append(DiagonalChannel(op=op, modulation=mod))
            else:
                if "intensity" not in ch:
                    raise ModelFileError(f"{where}: jump-diagonal needs 'intensity'")
                diag_jump.append(DiagonalChannel(op=op, intensity=float(ch["intensity"])))
        elif kind in ("diffusive-coupling", "jump-coupling"):
            grid = np.zeros((n, n, d, d), dtype=complex)
            for eidx, entry in enumerate(ch.get("entries", ())):
                ewhere = f"{where}.entries[{eidx}]"
                try:
                    i, j = int(entry["to"]) - 1, int(entry["from"]) - 1
                except KeyError as exc:
                    raise ModelFileError(f"{ewhere}: needs 'from' and 'to'") from exc
                if not (0 <= i < n and 0 <= j < n):
                    raise ModelFileError(f"{ewhere}: band indices out of range 1..{n}")
                spec = {k: v for k, v in entry.items() if k not in ("from", "to")}
                grid[i, j] = _parse_matrix(spec, d, ewhere)
            op = CouplingOperator(grid)
            if kind == "diffusive-coupling":
                coup_diff.append(CouplingChannel(op=op))
            else:
                lam = ch.get("intensities")
                if not isinstance(lam, Sequence) or len(lam) != n:
                    raise ModelFileError(f"{where}.intensities: expected {n} values")
                coup_jump.append(CouplingChannel(op=op, intensities=tuple(float(x) for x in lam)))
        else:
            raise ModelFileError(
                f"{where}.kind: expected one of diffusive-diagonal, jump-diagonal, "
                f"diffusive-coupling, jump-coupling; got {kind!r}")

    obs = doc.get("observed", {})
    extra = set(obs) - {"diffusive", "diagonal", "coupling"}
    if extra:
        raise ModelFileError(f"observed: unknown keys {sorted(extra)}")

    model = RateModel(
        n=n, d=d,
        hamiltonian=BlockOperator(H),
        diag_channels=tuple(diag_diff + diag_jump),
        coupling_channels=tuple(coup_diff + coup_jump),
        d1=len(diag_diff),
        d2=len(coup_diff),
        observed=ObservedCutoffs(
            diffusive=int(obs.get("diffusive", 0)),
            diagonal=int(obs.get("diagonal", 0)),
            coupling=int(obs.get("coupling", 0)),
        ),
    )
    problems = validate(model)
    if problems:
        raise ModelFileError("model file fails validation: " + "; ".join(problems))
    return model
