import dataclasses

import numpy as np
import pytest
from scipy.linalg import expm

import lindrate as lr
from lindrate.blockalg import BlockDensity, BlockOperator
from lindrate.master import (DegenerateEquilibriumError,
                             NotClassicallyReducibleError, Propagator,
                             write_evolution_csv)
from lindrate.model import (SIGMA_MINUS, SIGMA_Z, DiagonalChannel, RateModel)
from conftest import tracenorm_gap


def test_evolve_pure_hamiltonian_keeps_populations():
    H = np.stack([0.8 / 2 * SIGMA_Z, 1.3 / 2 * SIGMA_Z])
    m = RateModel(n=2, d=2, hamiltonian=BlockOperator(H),
                  diag_channels=(), coupling_channels=(), d1=0, d2=0)
    b1 = np.array([[0.42, 0.10 + 0.05j], [0.10 - 0.05j, 0.18]])
    b2 = np.array([[0.12, -0.04j], [0.04j, 0.28]])
    eta0 = BlockDensity(np.stack([b1, b2]), normalized=True)
    states = lr.evolve(m, eta0, [0.5, 1.0, 2.0])
    for st in states:
        pops = np.einsum("jaa->ja", st.blocks).real
        assert np.max(np.abs(pops - np.einsum("jaa->ja", eta0.blocks).real)) < 1e-12
        # unitary per band: eigenvalues preserved
        for j in range(2):
            assert np.allclose(np.linalg.eigvalsh(st.blocks[j]),
                               np.linalg.eigvalsh(eta0.blocks[j]), atol=1e-12)


def test_evolve_from_equilibrium_is_constant(model_star, eq_star):
    _, eq = eq_star
    states = lr.evolve(model_star, eq, [2.0, 10.0])
    for st in states:
        assert tracenorm_gap(st.blocks, eq.blocks) < 1e-10


def test_evolve_coherences_decay(model_star, mixed_state, params_star):
    horizon = 50.0 / params_star.gamma0
    final = lr.evolve(model_star, mixed_state, [horizon], method="expm")[0]
    off = final.blocks.copy()
    for j in range(2):
        np.fill_diagonal(off[j], 0.0)
    assert np.max(np.abs(off)) < 1e-8


def test_evolve_outputs_pass_density_invariants(model_star, mixed_state):
    for st in lr.evolve(model_star, mixed_state, np.linspace(0.5, 10, 20)):
        assert st.validate() == []


def test_evolve_rk4_matches_expm(model_star, mixed_state):
    a = lr.evolve(model_star, mixed_state, [1.0], method="rk4")[0]
    b = lr.evolve(model_star, mixed_state, [1.0], method="expm")[0]
    assert tracenorm_gap(a.blocks, b.blocks) < 1e-8


def test_propagator_trace_preserving_and_semigroup(model_star, mixed_state):
    prop = Propagator(model_star)
    x = mixed_state.blocks
    for t in (0.3, 1.1):
        assert abs(np.trace(prop.apply(t, x), axis1=-2, axis2=-1).sum().real - 1) < 1e-9
    one = prop.apply(0.7, prop.apply(0.4, x))
    two = prop.apply(1.1, x)
    assert np.max(np.abs(one - two)) < 1e-8


def test_equilibrium_closed_form_values(model_star):
    eq = lr.equilibrium(model_star)
    # frozen closed-form values at the reference parameter point
    p, z1p, z2p = 0.375, 1.0 / 3.0, 0.1
    expected = np.stack([
        p * np.diag([z1p, 1 - z1p]),
        (1 - p) * np.diag([z2p, 1 - z2p]),
    ]).astype(complex)
    assert np.max(np.abs(eq.blocks - expected)) < 1e-10
    assert abs((1 - p) * z2p - 0.5 * p * z1p) < 1e-12
    assert abs(eq.total_trace() - 1.0) < 1e-12


def test_equilibrium_matches_long_time_evolution(model_star, mixed_state):
    eq = lr.equilibrium(model_star)
    final = lr.evolve(model_star, mixed_state, [200.0], method="expm")[0]
    assert tracenorm_gap(final.blocks, eq.blocks) < 1e-8


def test_equilibrium_degenerate_null_space_reported():
    # two uncoupled decaying bands: any weight split is stationary
    H = np.zeros((2, 2, 2), dtype=complex)
    L = np.stack([SIGMA_MINUS, SIGMA_MINUS])
    m = RateModel(n=2, d=2, hamiltonian=BlockOperator(H),
                  diag_channels=(DiagonalChannel(op=BlockOperator(L)),),
                  coupling_channels=(), d1=1, d2=0)
    with pytest.raises(DegenerateEquilibriumError):
        lr.equilibrium(m)


def test_classical_reduction_rates(model_star, params_star):
    Q = lr.classical_reduction(model_star)
    g0, g1, g2, kap = (params_star.gamma0, params_star.gamma1,
                       params_star.gamma2, params_star.kappa)
    expected = np.zeros((4, 4))
    expected[1, 0] = g0          # band1 excited -> band1 ground
    expected[3, 0] = g1          # band1 excited -> band2 ground
    expected[2, 0] = g0 * kap    # band1 excited -> band2 excited
    expected[0, 3] = g2          # band2 ground -> band1 excited
    expected[3, 2] = g0          # band2 excited -> band2 ground
    expected[3, 1] = g0 * kap    # band1 ground -> band2 ground
    for col in range(4):
        expected[col, col] = -expected[:, col].sum()
    assert np.max(np.abs(Q - expected)) < 1e-12
    assert np.max(np.abs(Q.sum(axis=0))) < 1e-12


def test_classical_chain_stationary_distribution(model_star, eq_star):
    Q = lr.classical_reduction(model_star)
    w, v = np.linalg.eig(Q)
    idx = np.argmin(np.abs(w))
    pi = np.real(v[:, idx])
    pi /= pi.sum()
    coeffs, _ = eq_star
    expected = np.array([
        coeffs.p * coeffs.z1_plus, coeffs.p * coeffs.z1_minus,
        (1 - coeffs.p) * coeffs.z2_plus, (1 - coeffs.p) * coeffs.z2_minus,
    ])
    assert np.max(np.abs(pi - expected)) < 1e-12


def test_classical_chain_matches_population_dynamics(model_star, mixed_state):
    Q = lr.classical_reduction(model_star)
    pops0 = np.einsum("jaa->ja", mixed_state.blocks).real.ravel()
    for t in (0.5, 2.0, 7.0):
        state = lr.evolve(model_star, mixed_state, [t], method="expm")[0]
        pops = np.einsum("jaa->ja", state.blocks).real.ravel()
        assert np.max(np.abs(pops - expm(Q * t) @ pops0)) < 1e-10


def test_classical_reduction_pure_decay():
    # spontaneous emission only: each band decays independently
    H = np.zeros((2, 2, 2), dtype=complex)
    g0 = 0.9
    L = np.stack([np.sqrt(g0) * SIGMA_MINUS, np.sqrt(g0) * SIGMA_MINUS])
    m = RateModel(n=2, d=2, hamiltonian=BlockOperator(H),
                  diag_channels=(DiagonalChannel(op=BlockOperator(L)),),
                  coupling_channels=(), d1=1, d2=0)
    Q = lr.classical_reduction(m)
    expected = np.zeros((4, 4))
    expected[1, 0] = g0
    expected[0, 0] = -g0
    expected[3, 2] = g0
    expected[2, 2] = -g0
    assert np.max(np.abs(Q - expected)) < 1e-14


def test_classical_reduction_rejects_coherent_drive():
    sx = np.array([[0, 1], [1, 0]], dtype=complex)
    m = RateModel(n=1, d=2, hamiltonian=BlockOperator(sx[None] / 2),
                  diag_channels=(), coupling_channels=(), d1=0, d2=0)
    with pytest.raises(NotClassicallyReducibleError):
        lr.classical_reduction(m)


def test_conservation_along_evolution(model_star, mixed_state):
    grid = np.linspace(0.25, 10.0, 40)
    for st in lr.evolve(model_star, mixed_state, grid):
        assert abs(st.total_trace() - 1.0) <= 1e-9
        for b in st.blocks:
            assert np.linalg.eigvalsh((b + b.conj().T) / 2).min() >= -1e-8


def test_write_evolution_csv(tmp_path, model_star, mixed_state):
    grid = [0.0, 0.5, 1.0]
    states = lr.evolve(model_star, mixed_state, grid)
    path = tmp_path / "evolution.csv"
    write_evolution_csv(path, grid, states)
    rows = path.read_text().strip().splitlines()
    assert rows[0].startswith("time,") and rows[0].endswith("total_trace")
    assert len(rows) == 4
    last = [float(x) for x in rows[-1].split(",")]
    assert abs(last[-1] - 1.0) < 1e-9
