import json

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from diffqp.csc import SparseCSC, sym_from_upper


class TestConstruction:
    def test_from_dense_round_trip(self, rng):
        M = rng.standard_normal((5, 4)) * (rng.random((5, 4)) < 0.5)
        S = SparseCSC.from_dense(M)
        np.testing.assert_array_equal(S.to_dense(), M)
        assert S.nnz == np.count_nonzero(M)

    def test_triplets_sum_duplicates(self):
        S = SparseCSC.from_triplets(2, 2, [0, 0, 1], [1, 1, 0], [1.0, 2.0, 5.0])
        np.testing.assert_array_equal(S.to_dense(), [[0.0, 3.0], [5.0, 0.0]])

    def test_explicit_zero_kept(self):
        S = SparseCSC.from_triplets(2, 2, [0], [0], [0.0])
        assert S.nnz == 1

    def test_scipy_round_trip(self, rng):
        M = sp.random(6, 7, density=0.3, random_state=1, format="csc")
        S = SparseCSC.from_scipy(M)
        np.testing.assert_array_equal(S.to_scipy().toarray(), M.toarray())

    @pytest.mark.parametrize(
        "col_ptr,row_idx,values",
        [
            ([0, 2, 1], [0, 1], [1.0, 2.0]),  # decreasing col_ptr
            ([0, 2], [1, 0], [1.0, 2.0]),  # unsorted rows
            ([0, 2], [0, 0], [1.0, 2.0]),  # duplicate
            ([0, 1], [3], [1.0]),  # row out of range
            ([0, 2], [0, 1], [1.0]),  # length mismatch
        ],
    )
    def test_invalid(self, col_ptr, row_idx, values):
        with pytest.raises(ValueError):
            SparseCSC(3, len(col_ptr) - 1, np.array(col_ptr), np.array(row_idx), np.array(values))

    def test_immutable(self):
        S = SparseCSC.from_dense(np.eye(2))
        with pytest.raises(ValueError):
            S.values[0] = 3.0


class TestKernels:
    def test_matvec(self, rng):
        M = rng.standard_normal((6, 4)) * (rng.random((6, 4)) < 0.5)
        S = SparseCSC.from_dense(M)
        x = rng.standard_normal(4)
        y = rng.standard_normal(6)
        np.testing.assert_allclose(S.matvec(x), M @ x, atol=1e-14)
        np.testing.assert_allclose(S.rmatvec(y), M.T @ y, atol=1e-14)
        np.testing.assert_array_equal(S.transpose().to_dense(), M.T)

    def test_sym_from_upper(self, rng):
        G = rng.standard_normal((4, 4))
        P = G + G.T
        S = sym_from_upper(SparseCSC.from_dense(np.triu(P)))
        np.testing.assert_allclose(S.to_dense(), P)

    def test_json_round_trip(self, rng):
        S = SparseCSC.from_dense(rng.standard_normal((3, 3)))
        T = SparseCSC.from_json(json.loads(json.dumps(S.to_json())))
        np.testing.assert_array_equal(T.to_dense(), S.to_dense())
        assert set(S.to_json()) == {"nrows", "ncols", "col_ptr", "row_idx", "values"}


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.sampled_from([0.0, 1.0, -2.5, 3.25])))
def test_dense_round_trip_property(M):
    S = SparseCSC.from_dense(M)
    np.testing.assert_array_equal(S.to_dense(), M)
    np.testing.assert_array_equal(S.matvec(np.ones(M.shape[1])), M.sum(axis=1))
