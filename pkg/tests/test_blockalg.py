import numpy as np
import pytest

from lindrate.blockalg import (BlockDensity, BlockOperator, BlockVector,
                               CouplingOperator, block_sum, outer_blocks,
                               trace_norm)


def random_density_blocks(rng, n=2, d=2, normalized=True):
    blocks = []
    for _ in range(n):
        a = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
        blocks.append(a @ a.conj().T)
    blocks = np.stack(blocks)
    if normalized:
        blocks /= np.trace(blocks, axis1=-2, axis2=-1).sum().real
    return blocks


def test_block_sum_diagonal_addition():
    x = BlockDensity(np.stack([np.diag([0.3, 0.2]), np.diag([0.1, 0.4])]).astype(complex))
    assert np.allclose(block_sum(x), np.diag([0.4, 0.6]))


def test_block_sum_single_band_identity():
    b = np.array([[[0.7, 0.1j], [-0.1j, 0.3]]])
    assert np.array_equal(block_sum(BlockDensity(b)), b[0])


def test_block_sum_equilibrium_system_state(eq_star):
    # frozen from the closed forms: p*kappa = 0.1875
    _, eq = eq_star
    assert np.allclose(block_sum(eq), np.diag([0.1875, 0.8125]), atol=1e-12)


def test_outer_blocks_basis_vector():
    v = BlockVector(np.array([[1.0, 0.0], [0.0, 0.0]], dtype=complex))
    ob = outer_blocks(v)
    assert np.allclose(ob.blocks[0], np.diag([1.0, 0.0]))
    assert np.allclose(ob.blocks[1], 0.0)


def test_outer_blocks_unit_norm_trace_one():
    rng = np.random.default_rng(0)
    raw = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
    v = BlockVector(raw / np.linalg.norm(raw))
    assert abs(outer_blocks(v).total_trace() - 1.0) < 1e-14


def test_outer_blocks_trace_equals_norm2():
    rng = np.random.default_rng(1)
    for _ in range(25):
        v = BlockVector(rng.standard_normal((3, 4)) + 1j * rng.standard_normal((3, 4)))
        assert abs(outer_blocks(v).total_trace() - v.norm2()) < 1e-14 * max(1, v.norm2())


def test_outer_blocks_always_positive():
    rng = np.random.default_rng(2)
    for _ in range(10):
        v = BlockVector(rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2)))
        assert outer_blocks(v).validate() == []


def test_trace_norm_zero_and_normalized():
    assert trace_norm(BlockDensity(np.zeros((2, 2, 2), dtype=complex))) == 0.0
    rng = np.random.default_rng(3)
    x = BlockDensity(random_density_blocks(rng), normalized=True)
    assert abs(trace_norm(x) - 1.0) < 1e-12


def test_trace_norm_difference_bounded_by_two():
    rng = np.random.default_rng(4)
    for _ in range(50):
        a = random_density_blocks(rng)
        b = random_density_blocks(rng)
        val = trace_norm(BlockDensity(a - b))
        assert -1e-12 <= val <= 2 + 1e-12


def test_trace_norm_is_a_norm():
    rng = np.random.default_rng(5)
    for _ in range(25):
        a = rng.standard_normal((2, 3, 3)) + 1j * rng.standard_normal((2, 3, 3))
        b = rng.standard_normal((2, 3, 3)) + 1j * rng.standard_normal((2, 3, 3))
        s = rng.standard_normal() * 3
        assert abs(trace_norm(s * a) - abs(s) * trace_norm(a)) < 1e-12 * (1 + trace_norm(a))
        assert trace_norm(a + b) <= trace_norm(a) + trace_norm(b) + 1e-12


def test_block_sum_commutes_with_convex_combination():
    rng = np.random.default_rng(6)
    for _ in range(20):
        a = random_density_blocks(rng)
        b = random_density_blocks(rng)
        lam = rng.uniform()
        direct = block_sum(BlockDensity(lam * a + (1 - lam) * b))
        split = lam * block_sum(BlockDensity(a)) + (1 - lam) * block_sum(BlockDensity(b))
        assert np.max(np.abs(direct - split)) < 1e-14


def test_block_operator_hermitian_flag_verified():
    good = np.stack([np.diag([1.0, -1.0]), np.diag([0.5, 0.5])]).astype(complex)
    BlockOperator(good, hermitian=True)
    bad = good.copy()
    bad[0, 0, 1] = 0.1
    with pytest.raises(ValueError, match="hermitian"):
        BlockOperator(bad, hermitian=True)


def test_block_operator_apply_is_blockwise():
    op = BlockOperator(np.stack([np.diag([2.0, 3.0]), np.diag([5.0, 7.0])]).astype(complex))
    v = BlockVector(np.array([[1.0, 1.0], [1.0, 1.0]], dtype=complex))
    out = op.apply(v)
    assert np.allclose(out.blocks, [[2.0, 3.0], [5.0, 7.0]])


def test_coupling_operator_moves_bands():
    grid = np.zeros((2, 2, 2, 2), dtype=complex)
    grid[1, 0] = np.array([[0, 0], [1, 0]])  # lowers and moves band 1 -> 2
    op = CouplingOperator(grid)
    v = BlockVector(np.array([[1.0, 0.0], [0.0, 0.0]], dtype=complex))
    out = op.apply_from(0, v)
    assert np.allclose(out.blocks[0], 0.0)
    assert np.allclose(out.blocks[1], [0.0, 1.0])
    assert np.allclose(op.loss_operator(0), np.diag([1.0, 0.0]))


def test_block_density_validation_diagnostics():
    blocks = np.stack([np.diag([0.6, 0.2]), np.diag([0.3, -0.3])]).astype(complex)
    problems = BlockDensity(blocks, normalized=True).validate()
    assert any("eigenvalue" in p for p in problems)
    assert any("trace" in p for p in problems)
    nonherm = np.stack([np.array([[0.5, 0.2], [0.0, 0.5]])]).astype(complex)
    assert any("hermiticity" in p for p in BlockDensity(nonherm).validate())


def test_blocks_are_frozen():
    x = BlockDensity(np.zeros((1, 2, 2), dtype=complex))
    with pytest.raises(ValueError):
        x.blocks[0, 0, 0] = 1.0
