"""Block linear algebra on the composite space (system) x C^n.

Every object here is an n-tuple of small dense complex matrices or
vectors: one entry per value of the classical band label.  Operators are
block diagonal (one d x d matrix per band) unless they are coupling
operators, which carry a full n x n grid of d x d matrices and move
weight between bands.

All containers are immutable after construction and safe to share
between workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Default tolerances for validity checks.  SDE stepping introduces O(dt)
# violations, so these are applied at reporting boundaries, not per step.
HERMITIAN_TOL = 1e-10
PSD_FLOOR = -1e-9
TRACE_TOL = 1e-9

OPERATOR_HERMITIAN_TOL = 1e-12


def _freeze(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=complex)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class BlockVector:
    """A vector in the composite space: one length-d complex vector per band."""

    blocks: np.ndarray  # shape (n, d)

    def __post_init__(self):
        b = _freeze(self.blocks)
        if b.ndim != 2:
            raise ValueError("BlockVector blocks must have shape (n, d)")
        object.__setattr__(self, "blocks", b)

    @property
    def n(self) -> int:
        return self.blocks.shape[0]

    @property
    def d(self) -> int:
        return self.blocks.shape[1]

    def norm2(self) -> float:
        """Squared norm, summed over bands."""
        return float(np.sum(np.abs(self.blocks) ** 2))

    def norm(self) -> float:
        return float(np.sqrt(self.norm2()))


@dataclass(frozen=True)
class BlockOperator:
    """Block diagonal operator: band j of a vector goes through matrix j.

    If ``hermitian`` is set, every block is verified to equal its own
    conjugate transpose within ``OPERATOR_HERMITIAN_TOL``.
    """

    blocks: np.ndarray  # shape (n, d, d)
    hermitian: bool = False

    def __post_init__(self):
        b = _freeze(self.blocks)
        if b.ndim != 3 or b.shape[1] != b.shape[2]:
            raise ValueError("BlockOperator blocks must have shape (n, d, d)")
        if self.hermitian:
            gap = np.max(np.abs(b - np.conj(np.swapaxes(b, -1, -2))))
            if gap > OPERATOR_HERMITIAN_TOL:
                raise ValueError(
                    f"operator flagged hermitian but deviates by {gap:.3e}")
        object.__setattr__(self, "blocks", b)

    @property
    def n(self) -> int:
        return self.blocks.shape[0]

    @property
    def d(self) -> int:
        return self.blocks.shape[1]

    def apply(self, v: BlockVector) -> BlockVector:
        return BlockVector(np.einsum("jab,jb->ja", self.blocks, v.blocks))

    def dagger(self) -> "BlockOperator":
        return BlockOperator(np.conj(np.swapaxes(self.blocks, -1, -2)))


@dataclass(frozen=True)
class CouplingOperator:
    """Operator family moving weight between bands.

    Entry (i, j) maps band j of a vector into band i.  For a fixed
    source band j the column ``blocks[:, j]`` is one jump/diffusion
    operator of the extended dynamics.
    """

    blocks: np.ndarray  # shape (n, n, d, d); [i, j] maps band j -> band i

    def __post_init__(self):
        b = _freeze(self.blocks)
        if b.ndim != 4 or b.shape[0] != b.shape[1] or b.shape[2] != b.shape[3]:
            raise ValueError("CouplingOperator blocks must have shape (n, n, d, d)")
        object.__setattr__(self, "blocks", b)

    @property
    def n(self) -> int:
        return self.blocks.shape[0]

    @property
    def d(self) -> int:
        return self.blocks.shape[2]

    def apply_from(self, j: int, v: BlockVector) -> BlockVector:
        """Apply the family anchored at source band j: out_i = blocks[i, j] @ v_j."""
        out = np.einsum("iab,b->ia", self.blocks[:, j], v.blocks[j])
        return BlockVector(out)

    def loss_operator(self, j: int) -> np.ndarray:
        """sum_i blocks[i, j]^* blocks[i, j], the band-j decay operator."""
        col = self.blocks[:, j]
        return np.einsum("iba,ibc->ac", col.conj(), col)


@dataclass(frozen=True)
class BlockDensity:
    """An n-tuple of d x d matrices holding a (possibly unnormalized) state.

    Construction does not validate: differences and mid-integration
    iterates are legitimate carriers.  Call :meth:`validate` (or
    :meth:`require_valid`) at reporting boundaries.
    """

    blocks: np.ndarray  # shape (n, d, d)
    normalized: bool = field(default=False, compare=False)

    def __post_init__(self):
        b = _freeze(self.blocks)
        if b.ndim != 3 or b.shape[1] != b.shape[2]:
            raise ValueError("BlockDensity blocks must have shape (n, d, d)")
        object.__setattr__(self, "blocks", b)

    @property
    def n(self) -> int:
        return self.blocks.shape[0]

    @property
    def d(self) -> int:
        return self.blocks.shape[1]

    def total_trace(self) -> float:
        return float(np.trace(self.blocks, axis1=-2, axis2=-1).sum().real)

    def validate(self, herm_tol: float = HERMITIAN_TOL,
                 psd_floor: float = PSD_FLOOR,
                 trace_tol: float = TRACE_TOL) -> list[str]:
        """Return one diagnostic per violated invariant (empty if valid)."""
        problems = []
        for i, b in enumerate(self.blocks):
            gap = np.max(np.abs(b - b.conj().T))
            if gap > herm_tol:
                problems.append(f"block {i}: hermiticity violated by {gap:.3e}")
            w = np.linalg.eigvalsh((b + b.conj().T) / 2)
            if w.min() < psd_floor:
                problems.append(f"block {i}: min eigenvalue {w.min():.3e} below floor")
        if self.normalized:
            tr = self.total_trace()
            if abs(tr - 1.0) > trace_tol:
                problems.append(f"total trace {tr!r} differs from 1 beyond tolerance")
        return problems

    def require_valid(self, **kwargs) -> "BlockDensity":
        problems = self.validate(**kwargs)
        if problems:
            raise ValueError("invalid BlockDensity: " + "; ".join(problems))
        return self


def block_sum(x: BlockDensity) -> np.ndarray:
    """Sum the bands: the d x d reduced system state."""
    return np.asarray(x.blocks).sum(axis=0)


def outer_blocks(v: BlockVector) -> BlockDensity:
    """Bandwise outer product |v_i><v_i|; total trace equals the squared norm."""
    b = np.einsum("ja,jb->jab", v.blocks, v.blocks.conj())
    return BlockDensity(b)


def trace_norm(x: BlockDensity | np.ndarray) -> float:
    """Sum over bands of the singular values (the block trace norm)."""
    blocks = x.blocks if isinstance(x, BlockDensity) else np.asarray(x)
    if blocks.ndim == 2:
        blocks = blocks[None]
    return float(sum(np.linalg.svd(b, compute_uv=False).sum() for b in blocks))
