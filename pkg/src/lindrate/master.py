"""Deterministic propagation of the rate equation.

The bandwise generator is linear, so we vectorize it once into an
(n d^2) x (n d^2) matrix and propagate either with a fixed-step
classical Runge-Kutta integrator (the default: deterministic, good for
golden tests) or with cached dense matrix exponentials (the oracle path,
also used by the spectrum quadrature which needs the propagator on a
long uniform grid).
"""

from __future__ import annotations

import csv

import numpy as np
from scipy.linalg import expm

from .blockalg import BlockDensity
from .model import RateModel, rate_generator, require_valid


class DegenerateEquilibriumError(RuntimeError):
    """The vectorized generator has a null space of dimension != 1."""


class NotClassicallyReducibleError(ValueError):
    """Populations do not close under the generator."""


def generator_matrix(model: RateModel) -> np.ndarray:
    """The vectorized rate generator acting on stacked, row-flattened bands."""
    n, d = model.n, model.d
    dim = n * d * d
    G = np.empty((dim, dim), dtype=complex)
    for col in range(dim):
        e = np.zeros(dim, dtype=complex)
        e[col] = 1.0
        G[:, col] = rate_generator(model, e.reshape(n, d, d)).ravel()
    return G


def dominant_rate(model: RateModel) -> float:
    """Fastest scale of the generator; sets the default integrator step."""
    w = np.linalg.eigvals(generator_matrix(model))
    return max(1.0, float(np.max(np.abs(w))))


class Propagator:
    """Propagator family for the rate equation on raw band arrays.

    Acts on arbitrary (not necessarily hermitian) band matrices, which
    is what the spectrum quadrature needs.  Matrix exponentials are
    cached per requested time difference.
    """

    def __init__(self, model: RateModel):
        require_valid(model)
        self.model = model
        self.matrix = generator_matrix(model)
        self._expm_cache: dict[float, np.ndarray] = {}

    def step_matrix(self, t: float) -> np.ndarray:
        key = float(t)
        if key not in self._expm_cache:
            self._expm_cache[key] = expm(self.matrix * key)
        return self._expm_cache[key]

    def apply(self, t: float, blocks: np.ndarray) -> np.ndarray:
        n, d = self.model.n, self.model.d
        x = np.asarray(blocks, dtype=complex).reshape(n * d * d)
        return (self.step_matrix(t) @ x).reshape(n, d, d)

    def grid_apply(self, blocks: np.ndarray, h: float, count: int) -> np.ndarray:
        """States at times 0, h, 2h, ..., count*h (shape (count+1, n, d, d))."""
        n, d = self.model.n, self.model.d
        P = self.step_matrix(h)
        out = np.empty((count + 1, n * d * d), dtype=complex)
        out[0] = np.asarray(blocks, dtype=complex).ravel()
        for m in range(count):
            out[m + 1] = P @ out[m]
        return out.reshape(count + 1, n, d, d)


def _rk4(G: np.ndarray, x: np.ndarray, dt: float, steps: int) -> np.ndarray:
    for _ in range(steps):
        k1 = G @ x
        k2 = G @ (x + 0.5 * dt * k1)
        k3 = G @ (x + 0.5 * dt * k2)
        k4 = G @ (x + dt * k3)
        x = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


def evolve(model: RateModel, eta0: BlockDensity, t_grid,
           method: str = "rk4", dt: float | None = None) -> list[BlockDensity]:
    """Propagate the rate equation through the given increasing time grid.

    Parameters
    ----------
    eta0 : BlockDensity
        Normalized initial state.
    t_grid : sequence of float
        Increasing times; the first entry may be 0.
    method : {"rk4", "expm"}
        Fixed-step classical Runge-Kutta (default) or cached matrix
        exponentials.
    dt : float, optional
        Step for the rk4 path; defaults to 1e-3 over the dominant rate.
    """
    require_valid(model)
    eta0.require_valid()
    t_grid = [float(t) for t in t_grid]
    if any(b >= a for a, b in zip(t_grid[1:], t_grid[:-1])):
        raise ValueError("t_grid must be strictly increasing")
    G = generator_matrix(model)
    if dt is None:
        dt = 1e-3 / max(1.0, float(np.max(np.abs(np.linalg.eigvals(G)))))

    out = []
    x = eta0.blocks.ravel().astype(complex)
    prev = 0.0
    prop = Propagator(model) if method == "expm" else None
    for t in t_grid:
        span = t - prev
        if span < 0:
            raise ValueError("t_grid must not precede 0")
        if span > 0:
            if method == "rk4":
                steps = max(1, int(np.ceil(span / dt)))
                x = _rk4(G, x, span / steps, steps)
            elif method == "expm":
                x = prop.step_matrix(span) @ x
            else:
                raise ValueError(f"unknown method {method!r}")
        prev = t
        out.append(BlockDensity(x.reshape(model.n, model.d, model.d), normalized=True))
    return out


def equilibrium(model: RateModel) -> BlockDensity:
    """Stationary state from the null space of the vectorized generator.

    Raises DegenerateEquilibriumError when the null space is not one
    dimensional (second-smallest singular value below 1e-8 of the
    largest).
    """
    require_valid(model)
    G = generator_matrix(model)
    _, s, vh = np.linalg.svd(G)
    if s[-2] <= 1e-8 * s[0]:
        raise DegenerateEquilibriumError(
            f"null space not one dimensional (singular values {s[-2:]} of {s[0]:.3e})")
    blocks = vh[-1].conj().reshape(model.n, model.d, model.d)
    blocks = (blocks + np.conj(np.swapaxes(blocks, -1, -2))) / 2
    tr = np.trace(blocks, axis1=-2, axis2=-1).sum().real
    if abs(tr) < 1e-14:
        raise DegenerateEquilibriumError("null vector has zero total trace")
    return BlockDensity(blocks / tr, normalized=True)


def classical_reduction(model: RateModel) -> np.ndarray:
    """Rate matrix of the embedded classical chain over (band, level) states.

    Valid only when the populations close under the generator: applying
    it to any population basis matrix must give diagonal bands, and
    coherence basis matrices must produce no population components.
    Columns of the returned generator sum to zero; column (j, a) holds
    the outflow of state (band j, level a), ordered band major.
    """
    require_valid(model)
    n, d = model.n, model.d
    nstates = n * d
    Q = np.zeros((nstates, nstates))
    scale = 1.0
    for j in range(n):
        for a in range(d):
            basis = np.zeros((n, d, d), dtype=complex)
            basis[j, a, a] = 1.0
            img = rate_generator(model, basis)
            offdiag = img.copy()
            for i in range(n):
                np.fill_diagonal(offdiag[i], 0.0)
            scale = max(scale, float(np.max(np.abs(img))))
            if np.max(np.abs(offdiag)) > 1e-12 * scale:
                raise NotClassicallyReducibleError(
                    f"population state (band {j + 1}, level {a}) generates coherences")
            diag = np.real(np.einsum("icc->ic", img))
            if np.max(np.abs(np.imag(np.einsum("icc->ic", img)))) > 1e-12 * scale:
                raise NotClassicallyReducibleError("complex population rates")
            Q[:, j * d + a] = diag.ravel()
    # coherence sector must not feed populations
    for j in range(n):
        for a in range(d):
            for b in range(d):
                if a == b:
                    continue
                basis = np.zeros((n, d, d), dtype=complex)
                basis[j, a, b] = 1.0
                img = rate_generator(model, basis)
                pops = np.einsum("icc->ic", img)
                if np.max(np.abs(pops)) > 1e-12 * scale:
                    raise NotClassicallyReducibleError(
                        f"coherence (band {j + 1}, {a}{b}) feeds populations")
    return Q


def write_evolution_csv(path, t_grid, states: list[BlockDensity]) -> None:
    """One row per grid time: flattened Re/Im of every band plus total trace."""
    if not states:
        raise ValueError("no states to write")
    n, d = states[0].n, states[0].d
    header = ["time"]
    for i in range(n):
        for a in range(d):
            for b in range(d):
                header += [f"re_b{i + 1}_{a}{b}", f"im_b{i + 1}_{a}{b}"]
    header.append("total_trace")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t, st in zip(t_grid, states):
            row = [repr(float(t))]
            for val in st.blocks.ravel():
                row += [repr(float(val.real)), repr(float(val.imag))]
            row.append(repr(st.total_trace()))
            w.writerow(row)
