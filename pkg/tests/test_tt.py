"""TT-matrix algebra checked against brute-force oracles."""

import numpy as np
import pytest

from ttbayes import tt
from ttbayes.tt import FactorizedShape, TTMatrix, TTShapeError


def brute_force_reconstruct(ttm: TTMatrix) -> np.ndarray:
    """Independent oracle: per-entry chained slice products with explicit digit loops."""
    row_factors = ttm.shape.row_factors
    col_factors = ttm.shape.col_factors
    M, J = ttm.nrows, ttm.ncols
    out = np.zeros((M, J))
    for m in range(M):
        # manual mixed-radix decomposition, first factor most significant
        rd, mm = [], m
        for f in reversed(row_factors):
            rd.append(mm % f)
            mm //= f
        rd.reverse()
        for j in range(J):
            cd, jj = [], j
            for f in reversed(col_factors):
                cd.append(jj % f)
                jj //= f
            cd.reverse()
            prod = np.eye(1)
            for k, core in enumerate(ttm.cores):
                prod = prod @ core[:, rd[k], cd[k], :]
            out[m, j] = prod[0, 0]
    return out


def random_tt(rng, d=None, max_factor=4, max_rank=6):
    d = d or int(rng.integers(2, 5))
    mf = [int(rng.integers(1, max_factor + 1)) for _ in range(d)]
    jf = [int(rng.integers(1, max_factor + 1)) for _ in range(d)]
    ranks = [1] + [int(rng.integers(1, max_rank + 1)) for _ in range(d - 1)] + [1]
    cores = [rng.normal(size=(ranks[k], mf[k], jf[k], ranks[k + 1])) for k in range(d)]
    return TTMatrix(cores)


class TestIndexBijection:
    def test_first_index_maps_to_zero_digits(self):
        shape = FactorizedShape((3, 4, 2), (2, 5, 3))
        assert tt.index_to_multi(0, 0, shape) == ((0, 0, 0), (0, 0, 0))

    def test_last_index_maps_to_max_digits(self):
        shape = FactorizedShape((3, 4, 2), (2, 5, 3))
        rd, cd = tt.index_to_multi(shape.nrows - 1, shape.ncols - 1, shape)
        assert rd == (2, 3, 1)
        assert cd == (1, 4, 2)

    def test_mode_one_most_significant(self):
        # third row of a (2, 2)-factored axis has digits (1, 0)
        shape = FactorizedShape((2, 2), (2, 2))
        rd, _ = tt.index_to_multi(2, 0, shape)
        assert rd == (1, 0)

    def test_exhaustive_round_trip(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            d = int(rng.integers(2, 5))
            shape = FactorizedShape(
                tuple(int(rng.integers(1, 5)) for _ in range(d)),
                tuple(int(rng.integers(1, 5)) for _ in range(d)),
            )
            if shape.nrows > 64 or shape.ncols > 64:
                continue
            for m in range(shape.nrows):
                for j in range(shape.ncols):
                    rd, cd = tt.index_to_multi(m, j, shape)
                    assert tt.multi_to_index(rd, cd, shape) == (m, j)

    def test_bijectivity_2x2(self):
        shape = FactorizedShape((2, 2), (2, 2))
        seen = {tt.index_to_multi(m, 0, shape)[0] for m in range(4)}
        assert seen == {(0, 0), (0, 1), (1, 0), (1, 1)}

    def test_out_of_range_raises(self):
        shape = FactorizedShape((2, 2), (2, 2))
        with pytest.raises(TTShapeError):
            tt.index_to_multi(4, 0, shape)
        with pytest.raises(TTShapeError):
            tt.index_to_multi(0, -1, shape)
        with pytest.raises(TTShapeError):
            tt.multi_to_index((0, 2), (0, 0), shape)


class TestReconstruct:
    def test_zero_cores_give_zero_matrix(self):
        ttm = TTMatrix([np.zeros((1, 2, 2, 3)), np.zeros((3, 2, 2, 1))])
        assert np.array_equal(tt.tt_reconstruct(ttm), np.zeros((4, 4)))

    def test_two_core_column_vector(self):
        # rank-1 chain on a 4x1 matrix: entries are products of the digit slices
        g1 = np.array([1.0, 2.0]).reshape(1, 2, 1, 1)
        g2 = np.array([3.0, 4.0]).reshape(1, 2, 1, 1)
        out = tt.tt_reconstruct(TTMatrix([g1, g2]))
        assert np.array_equal(out, np.array([[3.0], [4.0], [6.0], [8.0]]))

    def test_matches_brute_force_on_4x4(self):
        rng = np.random.default_rng(0)
        cores = [rng.normal(size=(1, 2, 2, 3)), rng.normal(size=(3, 2, 2, 1))]
        ttm = TTMatrix(cores)
        assert np.abs(tt.tt_reconstruct(ttm) - brute_force_reconstruct(ttm)).max() < 1e-12

    def test_matches_brute_force_randomized(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            ttm = random_tt(rng, max_factor=3, max_rank=4)
            dense = tt.tt_reconstruct(ttm)
            assert np.abs(dense - brute_force_reconstruct(ttm)).max() < 1e-12


class TestMatvec:
    def test_zero_input(self):
        rng = np.random.default_rng(2)
        ttm = random_tt(rng, d=3)
        assert np.array_equal(tt.tt_matvec(ttm, np.zeros(ttm.nrows)), np.zeros(ttm.ncols))

    def test_identity_tt(self):
        # kron of 2x2 identities reconstructs the 4x4 identity under this digit order
        eye_core = np.eye(2).reshape(1, 2, 2, 1)
        ttm = TTMatrix([eye_core.copy(), eye_core.copy()])
        assert np.array_equal(tt.tt_reconstruct(ttm), np.eye(4))
        x = np.arange(4.0)
        assert np.allclose(tt.tt_matvec(ttm, x), x)

    def test_matches_dense_oracle_16x9(self):
        rng = np.random.default_rng(3)
        cores = [rng.normal(size=(1, 4, 3, 5)), rng.normal(size=(5, 4, 3, 1))]
        ttm = TTMatrix(cores)
        x = rng.normal(size=16)
        dense = tt.tt_reconstruct(ttm)
        y = tt.tt_matvec(ttm, x)
        ref = dense.T @ x
        assert np.abs(y - ref).max() / np.abs(ref).max() < 1e-10

    def test_matches_dense_oracle_randomized(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            ttm = random_tt(rng, max_rank=8)
            x = rng.normal(size=ttm.nrows)
            ref = tt.tt_reconstruct(ttm).T @ x
            err = np.abs(tt.tt_matvec(ttm, x) - ref).max()
            assert err <= 1e-10 * max(1.0, np.abs(ref).max())

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(5)
        ttm = random_tt(rng, d=2)
        with pytest.raises(TTShapeError):
            tt.tt_matvec(ttm, np.zeros(ttm.nrows + 1))

    def test_batch_backward_matches_dense(self):
        rng = np.random.default_rng(6)
        for _ in range(5):
            ttm = random_tt(rng, max_factor=3, max_rank=4)
            X = rng.normal(size=(3, ttm.nrows))
            W = tt.tt_reconstruct(ttm)
            out, cache = tt.apply_batch_forward(ttm.cores, X)
            assert np.abs(out - X @ W).max() < 1e-10
            G = rng.normal(size=out.shape)
            gx, gcores = tt.apply_batch_backward(ttm.cores, cache, G)
            assert np.abs(gx - G @ W.T).max() < 1e-10
            # chain rule through reconstruction: dL/dcore = d(X W G^T)/dcore
            h = 1e-6
            k = int(rng.integers(0, ttm.order))
            idx = tuple(int(rng.integers(0, s)) for s in ttm.cores[k].shape)
            cp = [c.copy() for c in ttm.cores]
            cm = [c.copy() for c in ttm.cores]
            cp[k][idx] += h
            cm[k][idx] -= h
            fd = (
                np.sum(tt.apply_batch(cp, X) * G) - np.sum(tt.apply_batch(cm, X) * G)
            ) / (2 * h)
            assert abs(gcores[k][idx] - fd) < 1e-5 * max(1.0, abs(fd))


class TestParamCount:
    def test_full_rank_reference_layer(self):
        shape = FactorizedShape((7, 4, 7, 4), (5, 5, 5, 5))
        assert tt.tt_param_count(shape, (1, 20, 20, 20, 1)) == 23100
        assert shape.nrows * shape.ncols == 490000

    def test_rank_one_degenerate(self):
        shape = FactorizedShape((3, 5), (2, 7))
        assert tt.tt_param_count(shape, (1, 1, 1)) == 3 * 2 + 5 * 7

    def test_pruned_reference_layer(self):
        shape = FactorizedShape((7, 4, 7, 4), (5, 5, 5, 5))
        assert tt.tt_param_count(shape, (1, 8, 1, 5, 1)) == 280 + 160 + 175 + 100

    def test_matches_constructed_core_sizes(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            ttm = random_tt(rng)
            total = sum(c.size for c in ttm.cores)
            assert tt.tt_param_count(ttm.shape, ttm.ranks) == total


class TestTruncate:
    def test_keep_all_is_identity(self):
        rng = np.random.default_rng(8)
        ttm = random_tt(rng, d=3)
        keep = [np.arange(r) for r in ttm.ranks[1:-1]]
        out = tt.tt_truncate(ttm, keep)
        for a, b in zip(out.cores, ttm.cores):
            assert np.array_equal(a, b)

    def test_zero_slices_drop_without_change(self):
        rng = np.random.default_rng(9)
        g1 = rng.normal(size=(1, 2, 2, 2))
        g2 = rng.normal(size=(2, 2, 2, 1))
        g1[..., 1] = 0.0
        g2[1, ...] = 0.0
        ttm = TTMatrix([g1, g2])
        out = tt.tt_truncate(ttm, [np.array([0])])
        assert np.abs(tt.tt_reconstruct(out) - tt.tt_reconstruct(ttm)).max() == 0.0

    def test_matches_zero_then_reconstruct_oracle(self):
        rng = np.random.default_rng(10)
        cores = [rng.normal(size=(1, 2, 2, 3)), rng.normal(size=(3, 2, 2, 1))]
        ttm = TTMatrix(cores)
        keep = [np.array([0, 2])]
        truncated = tt.tt_reconstruct(tt.tt_truncate(ttm, keep))
        # oracle: zero the dropped subtensors, then reconstruct at full rank
        z1, z2 = cores[0].copy(), cores[1].copy()
        z1[..., 1] = 0.0
        z2[1, ...] = 0.0
        oracle = tt.tt_reconstruct(TTMatrix([z1, z2]))
        assert np.abs(truncated - oracle).max() < 1e-12

    def test_idempotent_for_fixed_keep(self):
        rng = np.random.default_rng(12)
        ttm = random_tt(rng, d=3, max_rank=5)
        keep = [np.arange(min(2, r)) for r in ttm.ranks[1:-1]]
        once = tt.tt_truncate(ttm, keep)
        twice = tt.tt_truncate(once, [np.arange(len(k)) for k in keep])
        for a, b in zip(once.cores, twice.cores):
            assert np.array_equal(a, b)

    def test_empty_keep_set_rejected(self):
        rng = np.random.default_rng(13)
        ttm = random_tt(rng, d=2)
        with pytest.raises(TTShapeError):
            tt.tt_truncate(ttm, [np.array([], dtype=int)])


class TestConvKernelReshape:
    def test_scalar_passthrough(self):
        kernel = np.array([[[[2.5]]]])
        out = tt.conv_kernel_reshape(kernel, (1,), (1,))
        assert out.shape == (1, 1, 1)
        assert out.reshape(()) == 2.5

    def test_shape_arithmetic_and_round_trip(self):
        rng = np.random.default_rng(14)
        kernel = rng.normal(size=(3, 3, 4, 4))
        out = tt.conv_kernel_reshape(kernel, (2, 2), (2, 2))
        assert out.shape == (9, 2, 2, 2, 2)
        back = tt.conv_kernel_restore(out, 3, 4, 4)
        assert np.array_equal(back, kernel)

    def test_entry_sum_preserved(self):
        rng = np.random.default_rng(15)
        kernel = rng.normal(size=(3, 3, 8, 8))
        out = tt.conv_kernel_reshape(kernel, (2, 4), (4, 2))
        assert out.shape == (9, 2, 4, 4, 2)
        assert np.isclose(out.sum(), kernel.sum(), rtol=0, atol=0)

    def test_factorization_mismatch(self):
        kernel = np.zeros((3, 3, 8, 8))
        with pytest.raises(TTShapeError):
            tt.conv_kernel_reshape(kernel, (2, 2), (4, 2))


class TestValidation:
    def test_rank_chain_mismatch(self):
        with pytest.raises(TTShapeError):
            TTMatrix([np.zeros((1, 2, 2, 3)), np.zeros((2, 2, 2, 1))])

    def test_boundary_ranks(self):
        with pytest.raises(TTShapeError):
            TTMatrix([np.zeros((2, 2, 2, 3)), np.zeros((3, 2, 2, 1))])

    def test_non_finite_rejected(self):
        bad = np.zeros((1, 2, 2, 1))
        bad[0, 0, 0, 0] = np.nan
        with pytest.raises(TTShapeError):
            TTMatrix([bad, np.zeros((1, 2, 2, 1))])
