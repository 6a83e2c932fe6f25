import itertools

import numpy as np
import pytest

from sumrank.tensor import (
    DenseTensor,
    InvalidSubsetError,
    ModeSubset,
    Shape,
    allocation_audit,
    AmbientAllocationError,
    dematricize,
    matricize,
    null_space,
    pinv_solve,
    qr_nonneg,
    read_srt1,
    read_tensor_json,
    singular_values,
    write_srt1,
    write_tensor_json,
)


def random_tensor(dims, seed=0):
    rng = np.random.default_rng(seed)
    return DenseTensor(rng.standard_normal(dims))


class TestShapesAndSubsets:
    def test_shape_requires_two_modes(self):
        with pytest.raises(ValueError):
            Shape([4])

    def test_subset_validation(self):
        with pytest.raises(InvalidSubsetError):
            ModeSubset([], 3)
        with pytest.raises(InvalidSubsetError):
            ModeSubset([1, 2, 3], 3)
        with pytest.raises(InvalidSubsetError):
            ModeSubset([0], 3)
        s = ModeSubset([3, 1], 4)
        assert s.members == (1, 3)
        assert s.complement().members == (2, 4)

    def test_colex_contract(self):
        # for shape (2,2), entry [2,1] sits at flat position 1 (0-based)
        x = DenseTensor.zeros(Shape((2, 2)))
        x.array[1, 0] = 7.0
        assert x.data[1] == 7.0

    def test_flat_indexing_formula(self):
        dims = (2, 3, 4)
        x = random_tensor(dims, 3)
        data = x.data
        n1, n2, _ = dims
        for a1, a2, a3 in itertools.product(range(2), range(3), range(4)):
            flat = a1 + n1 * a2 + n1 * n2 * a3
            assert data[flat] == x.array[a1, a2, a3]


class TestMatricize:
    def test_identity_matricization(self):
        x = random_tensor((2, 3), 1)
        assert np.array_equal(matricize(x, (1,)), x.array)

    def test_elementary_tensor_rank_one(self):
        rng = np.random.default_rng(2)
        vs = [rng.standard_normal(n) for n in (2, 3, 4)]
        x = DenseTensor(np.einsum("i,j,k->ijk", *vs))
        for members in [(1,), (2,), (3,), (1, 2), (1, 3), (2, 3)]:
            m = matricize(x, members)
            assert np.linalg.matrix_rank(m, tol=1e-10) == 1

    def test_transpose_relation_by_enumeration(self):
        # matricize over {2} is the transpose of matricize over {1,3} after
        # reindexing both sides by the colex bijections
        x = random_tensor((2, 3, 4), 5)
        a = matricize(x, (2,))
        b = matricize(x, (1, 3))
        for a1 in range(2):
            for a2 in range(3):
                for a3 in range(4):
                    row_a, col_a = a2, a1 + 2 * a3
                    row_b, col_b = a1 + 2 * a3, a2
                    assert a[row_a, col_a] == x.array[a1, a2, a3]
                    assert b[row_b, col_b] == x.array[a1, a2, a3]

    def test_roundtrip_exact(self):
        x = random_tensor((4, 4, 4, 4), 7)
        d = 4
        for size in range(1, d):
            for members in itertools.combinations(range(1, d + 1), size):
                m = matricize(x, members)
                back = dematricize(m, members, x.shape)
                assert np.array_equal(back.array, x.array)

    def test_defining_identity_on_elementary_tensor(self):
        rng = np.random.default_rng(11)
        vs = [rng.standard_normal(n) for n in (2, 3, 2)]
        x = DenseTensor(np.einsum("i,j,k->ijk", *vs))
        m = matricize(x, (1, 3))
        left = np.einsum("i,k->ik", vs[0], vs[2]).reshape(-1, order="F")
        assert np.allclose(m, np.outer(left, vs[1]))

    def test_invalid_subset_errors(self):
        x = random_tensor((2, 2, 2), 0)
        with pytest.raises(InvalidSubsetError):
            matricize(x, ())
        with pytest.raises(InvalidSubsetError):
            matricize(x, (1, 2, 3))


class TestSpectra:
    def test_zero_tensor(self):
        x = DenseTensor.zeros(Shape((3, 3)))
        assert np.all(singular_values(x, (1,)) == 0)

    def test_diag_matrix(self):
        x = DenseTensor(np.diag([3.0, 1.0]))
        assert np.allclose(singular_values(x, (1,)), [3.0, 1.0])

    def test_frobenius_identity(self):
        x = random_tensor((3, 3, 3), 13)
        for members in [(1,), (2,), (3,), (1, 2), (1, 3), (2, 3)]:
            sig = singular_values(x, members)
            assert np.isclose(np.sum(sig**2), x.norm() ** 2, rtol=1e-10)

    def test_complement_spectra_match(self):
        x = random_tensor((2, 3, 4), 17)
        s1 = singular_values(x, (1, 3))
        s2 = singular_values(x, (2,))
        k = min(s1.size, s2.size)
        assert np.allclose(s1[:k], s2[:k], rtol=1e-10)

    def test_padding(self):
        x = random_tensor((4, 2, 2), 19)
        sig = singular_values(x, (1,), pad_to_rows=True)
        assert sig.size == 4
        assert np.all(sig[-0:] >= 0)


class TestKernels:
    def test_pinv_identity(self):
        b = np.arange(4.0)
        assert np.allclose(pinv_solve(np.eye(4), b), b)

    def test_pinv_min_norm(self):
        a = np.array([[1.0, 0.0], [0.0, 0.0]])
        x = pinv_solve(a, np.array([1.0, 1.0]))
        assert np.allclose(x, [1.0, 0.0])

    def test_pinv_full_row_rank_residual(self):
        rng = np.random.default_rng(23)
        a = rng.standard_normal((5, 8))
        b = rng.standard_normal(5)
        x = pinv_solve(a, b)
        assert np.linalg.norm(a @ x - b) <= 1e-10 * np.linalg.norm(b)

    def test_pinv_dim_mismatch(self):
        with pytest.raises(ValueError):
            pinv_solve(np.eye(3), np.ones(4))

    def test_null_space(self):
        rng = np.random.default_rng(29)
        a = rng.standard_normal((3, 7))
        k = null_space(a)
        assert k.shape == (7, 4)
        assert np.linalg.norm(a @ k) <= 1e-10 * np.linalg.norm(a)
        assert np.allclose(k.T @ k, np.eye(4), atol=1e-12)

    def test_null_space_full_rank_square(self):
        assert null_space(np.eye(3)).shape == (3, 0)

    def test_qr_nonneg(self):
        rng = np.random.default_rng(31)
        a = rng.standard_normal((6, 3))
        q, r = qr_nonneg(a)
        assert np.all(np.diag(r) >= 0)
        assert np.allclose(q @ r, a)
        assert np.allclose(q.T @ q, np.eye(3), atol=1e-12)


class TestFileFormats:
    def test_srt1_roundtrip(self, tmp_path):
        x = random_tensor((2, 3, 2), 37)
        path = tmp_path / "x.srt1"
        write_srt1(path, x)
        back = read_srt1(path)
        assert back.shape == x.shape
        assert np.array_equal(back.array, x.array)
        with open(path, "rb") as fh:
            assert fh.read(4) == b"SRT1"

    def test_json_roundtrip(self, tmp_path):
        x = random_tensor((2, 2, 3), 41)
        path = tmp_path / "x.json"
        write_tensor_json(path, x)
        back = read_tensor_json(path)
        assert np.allclose(back.array, x.array)


class TestAllocationAudit:
    def test_strict_audit_raises(self):
        with pytest.raises(AmbientAllocationError):
            with allocation_audit(10):
                DenseTensor.zeros(Shape((4, 4)))

    def test_non_strict_records(self):
        with allocation_audit(10, strict=False) as audit:
            DenseTensor.zeros(Shape((4, 4)))
        assert audit.violations == [16]

    def test_small_allocations_pass(self):
        with allocation_audit(100) as audit:
            DenseTensor.zeros(Shape((4, 4)))
        assert audit.violations == []
