import dataclasses

import numpy as np
import pytest

import lindrate as lr
from lindrate.blockalg import BlockDensity, BlockOperator, CouplingOperator
from lindrate.model import (SIGMA_MINUS, SIGMA_Z, CouplingChannel,
                            DiagonalChannel, ModelFileError, ObservedCutoffs,
                            PhaseModulation, RateModel, assemble,
                            diag_blocks_to_full, full_to_diag_blocks,
                            identity, load_model, model_from_dict, validate)


def hamiltonian_only_model(n=2, d=2, w=(1.0, 1.2)):
    H = np.stack([w[i] / 2 * SIGMA_Z for i in range(n)])
    return RateModel(n=n, d=d, hamiltonian=BlockOperator(H),
                     diag_channels=(), coupling_channels=(), d1=0, d2=0)


def random_block_diag_density(rng, n=2, d=2):
    blocks = []
    for _ in range(n):
        a = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
        blocks.append(a @ a.conj().T)
    blocks = np.stack(blocks)
    return blocks / np.trace(blocks, axis1=-2, axis2=-1).sum().real


def multi_destination_model():
    """A coupling column with two destination bands (generic shape)."""
    H = np.stack([0.5 * SIGMA_Z, 0.7 * SIGMA_Z])
    grid = np.zeros((2, 2, 2, 2), dtype=complex)
    grid[0, 0] = 0.6 * SIGMA_MINUS
    grid[1, 0] = 0.4 * identity(2)
    return RateModel(
        n=2, d=2, hamiltonian=BlockOperator(H),
        diag_channels=(), d1=0,
        coupling_channels=(CouplingChannel(op=CouplingOperator(grid),
                                           intensities=(0.5, 0.0)),),
        d2=0)


def test_validate_two_level_model_clean(model_star):
    assert validate(model_star) == []


def test_validate_flags_nonhermitian_hamiltonian(model_star):
    H = model_star.hamiltonian.blocks.copy()
    H[0, 0, 1] = 0.3
    bad = dataclasses.replace(model_star, hamiltonian=BlockOperator(H))
    problems = validate(bad)
    assert any("block 0" in p and "hermitian" in p for p in problems)


def test_validate_zero_intensity_dead_channel_allowed(model_star):
    # the band-swap channel of the builtin model has a dead source band
    ch = model_star.coupling_channels[1]
    assert ch.intensities[1] == 0.0
    assert np.max(np.abs(ch.op.blocks[:, 1])) == 0.0
    assert validate(model_star) == []


def test_validate_zero_intensity_live_channel_rejected(model_star):
    ch = model_star.coupling_channels[0]
    bad_ch = CouplingChannel(op=ch.op, intensities=(0.0, ch.intensities[1]))
    bad = dataclasses.replace(
        model_star, coupling_channels=(bad_ch, model_star.coupling_channels[1]))
    assert any("zero intensity" in p for p in validate(bad))


def test_validate_observed_cutoff_ranges(model_star):
    bad = dataclasses.replace(model_star, observed=ObservedCutoffs(diffusive=5))
    assert any("observed.diffusive" in p for p in validate(bad))


def test_rate_generator_pure_hamiltonian():
    m = hamiltonian_only_model()
    rng = np.random.default_rng(0)
    tau = random_block_diag_density(rng)
    out = lr.rate_generator(m, tau)
    H = m.hamiltonian.blocks
    expected = -1j * (H @ tau - tau @ H)
    assert np.max(np.abs(out - expected)) < 1e-15


def test_rate_generator_vanishes_at_equilibrium(model_star, eq_star):
    _, eq = eq_star
    out = lr.rate_generator(model_star, eq)
    assert np.max(np.abs(out.blocks)) < 1e-12


def test_rate_generator_trace_preserving(model_star):
    rng = np.random.default_rng(1)
    for _ in range(20):
        tau = random_block_diag_density(rng)
        out = lr.rate_generator(model_star, tau)
        assert abs(np.trace(out, axis1=-2, axis2=-1).sum()) < 1e-13


def test_rate_generator_linear(model_star):
    rng = np.random.default_rng(2)
    a = random_block_diag_density(rng)
    b = random_block_diag_density(rng)
    ca, cb = 0.7, -1.3
    lhs = lr.rate_generator(model_star, ca * a + cb * b)
    rhs = ca * lr.rate_generator(model_star, a) + cb * lr.rate_generator(model_star, b)
    assert np.max(np.abs(lhs - rhs)) < 1e-13


def test_extended_generator_diagonal_blocks(model_star):
    rng = np.random.default_rng(3)
    for _ in range(10):
        blocks = random_block_diag_density(rng)
        full = lr.extended_generator(model_star, diag_blocks_to_full(blocks))
        gap = np.max(np.abs(full_to_diag_blocks(full, 2, 2)
                            - lr.rate_generator(model_star, blocks)))
        assert gap < 1e-13


def test_extended_generator_hamiltonian_only():
    m = hamiltonian_only_model()
    rng = np.random.default_rng(4)
    T = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
    T = T + T.conj().T
    H = diag_blocks_to_full(m.hamiltonian.blocks)
    assert np.max(np.abs(lr.extended_generator(m, T) + 1j * (H @ T - T @ H))) < 1e-14


def test_extended_generator_traceless(model_star):
    rng = np.random.default_rng(5)
    T = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
    T = T + T.conj().T
    T /= np.trace(T).real
    assert abs(np.trace(lr.extended_generator(model_star, T))) < 1e-13


def test_tilde_generator_matches_on_diagonal_blocks(model_star):
    rng = np.random.default_rng(6)
    for _ in range(10):
        blocks = random_block_diag_density(rng)
        full = lr.tilde_generator(model_star, diag_blocks_to_full(blocks))
        gap = np.max(np.abs(full_to_diag_blocks(full, 2, 2)
                            - lr.rate_generator(model_star, blocks)))
        assert gap < 1e-13


def test_tilde_differs_off_diagonal_with_coupling(model_star):
    # a full-space state with off-diagonal blocks separates the two
    # generators through the summed emission family
    rng = np.random.default_rng(7)
    T = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
    T = T + T.conj().T
    ge = lr.extended_generator(model_star, T)
    gt = lr.tilde_generator(model_star, T)
    assert np.max(np.abs(ge - gt)) > 1e-6
    # and a block-diagonal state separates them through a coupling
    # column with several destination bands
    m = multi_destination_model()
    blocks = random_block_diag_density(rng)
    ge = lr.extended_generator(m, diag_blocks_to_full(blocks))
    gt = lr.tilde_generator(m, diag_blocks_to_full(blocks))
    offdiag = (ge - gt).copy()
    offdiag[:2, :2] = 0
    offdiag[2:, 2:] = 0
    assert np.max(np.abs(offdiag)) > 1e-6


def test_generators_coincide_without_coupling_on_block_diagonal_states():
    H = np.stack([0.5 * SIGMA_Z, 0.7 * SIGMA_Z])
    L = np.stack([np.sqrt(0.8) * SIGMA_MINUS, np.sqrt(0.8) * SIGMA_MINUS])
    m = RateModel(n=2, d=2, hamiltonian=BlockOperator(H),
                  diag_channels=(DiagonalChannel(op=BlockOperator(L)),),
                  coupling_channels=(), d1=1, d2=0)
    rng = np.random.default_rng(8)
    blocks = random_block_diag_density(rng)
    T = diag_blocks_to_full(blocks)
    assert np.max(np.abs(lr.extended_generator(m, T) - lr.tilde_generator(m, T))) < 1e-14


def test_assembled_drift_matches_reassembly(model_star):
    asm = assemble(model_star)
    n, d = model_star.n, model_star.d
    expected = -1j * model_star.hamiltonian.blocks.copy()
    for ch in model_star.diag_channels:
        L = ch.op.blocks
        expected -= 0.5 * np.einsum("jba,jbc->jac", L.conj(), L)
    for ch in model_star.coupling_channels:
        R = ch.op.blocks
        for j in range(n):
            loss = sum(R[k, j].conj().T @ R[k, j] for k in range(n))
            expected[j] -= 0.5 * loss
    assert np.max(np.abs(asm.drift_mats - expected)) < 1e-14
    # band-summed reference intensities and their total
    lam = model_star.coupling_channels
    assert np.allclose(asm.coupling_rate_sums,
                       [sum(lam[0].intensities), sum(lam[1].intensities)])
    assert asm.jump_rate_total == sum(sum(ch.intensities) for ch in lam)


def test_phase_modulation_leaves_generators_unchanged(params_star, model_star):
    rng = np.random.default_rng(9)
    stripped_channels = tuple(
        DiagonalChannel(op=ch.op, modulation=None, intensity=ch.intensity)
        for ch in model_star.diag_channels)
    m_plain = dataclasses.replace(model_star, diag_channels=stripped_channels)
    blocks = random_block_diag_density(rng)
    assert np.max(np.abs(lr.rate_generator(model_star, blocks)
                         - lr.rate_generator(m_plain, blocks))) == 0.0
    T = diag_blocks_to_full(blocks)
    assert np.max(np.abs(lr.extended_generator(model_star, T)
                         - lr.extended_generator(m_plain, T))) == 0.0


def test_choi_matrix_of_short_time_propagator(model_star):
    dt = 1e-4
    dim = model_star.n * model_star.d
    choi = np.zeros((dim * dim, dim * dim), dtype=complex)
    for a in range(dim):
        for b in range(dim):
            E = np.zeros((dim, dim), dtype=complex)
            E[a, b] = 1.0
            img = E + dt * lr.extended_generator(model_star, E)
            choi[a * dim:(a + 1) * dim, b * dim:(b + 1) * dim] = img.reshape(dim, dim)
    # standard rearrangement: Choi[(a i),(b j)] = map(E_ab)_{ij}
    choi = choi.reshape(dim, dim, dim, dim).transpose(0, 2, 1, 3).reshape(dim**2, dim**2)
    w = np.linalg.eigvalsh((choi + choi.conj().T) / 2)
    assert w.min() >= -10 * dt**2


def test_phase_modulation_local_oscillator_unit_modulus():
    mod = PhaseModulation.local_oscillator(1.7, 3)
    f = mod.factors(2.3)
    assert f.shape == (3,)
    assert np.max(np.abs(np.abs(f) - 1)) < 1e-15
    assert mod.freq == 1.7


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------

TWO_LEVEL_TOML = """
n = 2
d = 2
hamiltonian = [
  {{ op = "sigma_z", scale = 0.5 }},
  {{ op = "sigma_z", scale = 0.6 }},
]

[[channels]]
kind = "diffusive-diagonal"
modulation_freq = 1.0
blocks = [
  {{ op = "sigma_minus", scale = {w_det} }},
  {{ op = "sigma_minus", scale = {w_det} }},
]

[[channels]]
kind = "diffusive-diagonal"
modulation_freq = 1.0
blocks = [
  {{ op = "sigma_minus", scale = {w_lost} }},
  {{ op = "sigma_minus", scale = {w_lost} }},
]

[[channels]]
kind = "jump-coupling"
intensities = [0.3, 0.4]
entries = [
  {{ from = 1, to = 2, op = "sigma_minus", scale = {w_g1} }},
  {{ from = 2, to = 1, op = "sigma_plus", scale = {w_g2} }},
]

[[channels]]
kind = "jump-coupling"
intensities = [0.5, 0.0]
entries = [
  {{ from = 1, to = 2, op = "identity", scale = {w_swap} }},
]

[observed]
diffusive = 1
diagonal = 2
coupling = 0
"""


def write_two_level_toml(path, params):
    g0, eps = params.gamma0, params.efficiency
    text = TWO_LEVEL_TOML.format(
        w_det=np.sqrt(g0 * eps), w_lost=np.sqrt(g0 * (1 - eps)),
        w_g1=np.sqrt(params.gamma1), w_g2=np.sqrt(params.gamma2),
        w_swap=np.sqrt(g0 * params.kappa))
    path.write_text(text)


def test_model_file_round_trip(tmp_path, params_star, model_star):
    path = tmp_path / "twolevel.toml"
    write_two_level_toml(path, params_star)
    loaded = load_model(path)
    assert loaded.n == 2 and loaded.d == 2
    assert loaded.d1 == 2 and loaded.m1 == 2 and loaded.m2 == 2
    assert loaded.observed == ObservedCutoffs(1, 2, 0)
    rng = np.random.default_rng(10)
    blocks = random_block_diag_density(rng)
    gap = np.max(np.abs(lr.rate_generator(loaded, blocks)
                        - lr.rate_generator(model_star, blocks)))
    assert gap < 1e-12


def test_model_file_syntax_error_cites_line(tmp_path):
    path = tmp_path / "broken.toml"
    path.write_text("n = 2\nd = 2\nhamiltonian = ]oops[\n")
    with pytest.raises(ModelFileError, match=r"line 3"):
        load_model(path)


def test_model_file_schema_error_cites_field():
    doc = {"n": 2, "d": 2,
           "hamiltonian": [{"op": "sigma_z"}, {"op": "sigma_z"}],
           "channels": [{"kind": "jump-diagonal",
                         "blocks": [{"op": "sigma_minus"}, {"op": "sigma_minus"}]}]}
    with pytest.raises(ModelFileError, match=r"channels\[0\].*intensity"):
        model_from_dict(doc)
    doc_bad_op = {"n": 2, "d": 2,
                  "hamiltonian": [{"op": "sigma_q"}, {"op": "sigma_z"}],
                  "channels": []}
    with pytest.raises(ModelFileError, match=r"hamiltonian\[0\]"):
        model_from_dict(doc_bad_op)


def test_model_file_explicit_matrix_entries():
    doc = {"n": 1, "d": 2,
           "hamiltonian": [[["0.5", "0"], ["0", "-0.5"]]],
           "channels": [{"kind": "diffusive-diagonal",
                         "blocks": [[["0", "0"], ["1", "0"]]]}]}
    m = model_from_dict(doc)
    assert np.allclose(m.hamiltonian.blocks[0], 0.5 * SIGMA_Z)
    assert np.allclose(m.diag_channels[0].op.blocks[0], SIGMA_MINUS)
