import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentsteer.errors import ContractError
from latentsteer.vq import (Codebook, quantize_cell, quantize_grid,
                            straight_through_adjoint)


def brute_force_index(cell, vectors):
    """Independent oracle: explicit per-row scan with <= tie rule."""
    best, best_d = 0, None
    for k, row in enumerate(vectors):
        d = 0.0
        for a, b in zip(cell, row):
            d += (a - b) ** 2
        if best_d is None or d < best_d:
            best, best_d = k, d
    return best


def test_two_code_example():
    book = Codebook(np.array([[0.0, 0.0], [1.0, 1.0]]))
    cell = np.array([0.2, 0.1])
    assert quantize_cell(cell, book) == 0
    d0 = np.linalg.norm(cell - book.vectors[0])
    d1 = np.linalg.norm(cell - book.vectors[1])
    np.testing.assert_allclose([d0, d1], [0.2236, 1.2042], atol=5e-5)


def test_duplicate_rows_pick_smallest_index():
    row = np.array([0.5, -0.5, 2.0])
    book = Codebook(np.stack([row + 10.0, row, row, row - 10.0]))
    assert quantize_cell(row + 0.01, book) == 1


def test_exact_geometric_tie():
    book = Codebook(np.array([[2.0, 0.0], [0.0, 0.0]]))
    # (1, 0) is exactly equidistant; smallest index wins
    assert quantize_cell(np.array([1.0, 0.0]), book) == 0


def test_random_cells_match_brute_force():
    gen = np.random.default_rng(7)
    for _ in range(200):
        k = int(gen.integers(1, 65))
        d = int(gen.integers(1, 9))
        vectors = gen.standard_normal((k, d)) * 3.0
        if k > 2 and gen.random() < 0.3:
            vectors[k // 2] = vectors[k - 1]  # force a duplicate-row tie
        book = Codebook(vectors)
        cell = gen.standard_normal(d) * 3.0
        if gen.random() < 0.2:
            cell = vectors[int(gen.integers(0, k))].copy()
        assert quantize_cell(cell, book) == brute_force_index(cell, vectors)


def test_grid_matches_cellwise():
    gen = np.random.default_rng(3)
    book = Codebook(gen.standard_normal((16, 4)))
    z = gen.standard_normal((5, 6, 4))
    q = quantize_grid(z, book)
    assert q.indices.shape == (5, 6)
    assert q.values.shape == (5, 6, 4)
    for i in range(5):
        for j in range(6):
            k = quantize_cell(z[i, j], book)
            assert q.indices[i, j] == k
            np.testing.assert_array_equal(q.values[i, j], book.vectors[k])


def test_quantize_is_idempotent():
    gen = np.random.default_rng(11)
    book = Codebook(gen.standard_normal((8, 3)))
    z = gen.standard_normal((4, 4, 3))
    q1 = quantize_grid(z, book)
    q2 = quantize_grid(q1.values, book)
    np.testing.assert_array_equal(q1.indices, q2.indices)
    np.testing.assert_array_equal(q1.values, q2.values)


@given(st.integers(1, 12), st.integers(1, 6))
@settings(max_examples=25, deadline=None)
def test_selected_values_are_codebook_rows(k, d):
    gen = np.random.default_rng(k * 100 + d)
    book = Codebook(gen.standard_normal((k, d)))
    z = gen.standard_normal((3, 3, d))
    q = quantize_grid(z, book)
    assert q.indices.min() >= 0 and q.indices.max() < k
    np.testing.assert_array_equal(q.values, book.vectors[q.indices])


def test_straight_through_is_identity():
    g = np.random.default_rng(0).standard_normal((4, 4, 4))
    np.testing.assert_array_equal(straight_through_adjoint(g), g)


def test_contract_errors():
    book = Codebook(np.eye(3))
    with pytest.raises(ContractError):
        quantize_cell(np.zeros(2), book)
    with pytest.raises(ContractError):
        quantize_grid(np.zeros((2, 2, 2)), book)
    with pytest.raises(ContractError):
        quantize_grid(np.full((2, 2, 3), np.nan), book)
    with pytest.raises(ContractError):
        Codebook(np.zeros((0, 3)))
    with pytest.raises(ContractError):
        Codebook(np.array([[np.inf, 0.0]]))
