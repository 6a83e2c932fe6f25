import numpy as np
import pytest

from sumrank.family import bbht_family, build_tree, tucker_family
from sumrank.network import contract_full, random_network
from sumrank.operators import (
    DecomposedOperator,
    DenseOperator,
    OperatorError,
    SamplingOperator,
    gaussian_decomposed,
    gaussian_dense,
    kernel_basis,
    read_operator,
    sampling,
    write_operator,
)
from sumrank.tensor import DenseTensor, Shape


SHAPE = Shape((3, 3, 3, 3))


def _net(seed=0, r=2):
    fam = bbht_family(4)
    g = build_tree(fam)
    return random_network(g, {e: r for e in g.edges}, SHAPE, seed), g


class TestDenseOperator:
    def test_identity_operator_vectorizes(self):
        shape = Shape((2, 3))
        op = DenseOperator(np.eye(6), shape, check_surjective=False)
        x = DenseTensor(np.arange(6.0).reshape(2, 3, order="F"))
        assert np.array_equal(op.apply(x), x.data)

    def test_surjectivity_enforced(self):
        shape = Shape((2, 3))
        bad = np.zeros((2, 6))
        bad[0, 0] = 1.0
        with pytest.raises(OperatorError):
            DenseOperator(bad, shape)

    def test_adjoint_contract(self):
        rng = np.random.default_rng(1)
        op = gaussian_dense(10, SHAPE, 4)
        x = DenseTensor(rng.standard_normal(SHAPE.dims))
        y = rng.standard_normal(10)
        lhs = float(op.apply(x) @ y)
        rhs = float(np.sum(op.apply_adjoint(y).array * x.array))
        assert np.isclose(lhs, rhs, rtol=1e-10)

    def test_row_norm_concentration(self):
        shape = Shape((5, 5, 5, 5))
        op = gaussian_dense(60, shape, 11)
        norms = np.linalg.norm(op.matrix, axis=1)
        assert abs(np.mean(norms) - np.sqrt(625)) <= 0.1 * np.sqrt(625)

    def test_ell_bound(self):
        with pytest.raises(OperatorError):
            gaussian_dense(81, SHAPE, 0)


class TestSampling:
    def test_gather_scatter(self):
        rng = np.random.default_rng(2)
        op = sampling(10, SHAPE, 5)
        x = DenseTensor(rng.standard_normal(SHAPE.dims))
        vals = op.apply(x)
        back = op.apply_adjoint(vals)
        assert np.allclose(op.apply(back), vals)
        assert np.count_nonzero(back.array) <= 10

    def test_indices_distinct_and_in_range(self):
        op = sampling(50, SHAPE, 7)
        assert len(set(op.indices)) == 50
        for p in op.indices:
            assert all(1 <= p[k] <= 3 for k in range(4))

    def test_adjoint_contract(self):
        rng = np.random.default_rng(3)
        op = sampling(12, SHAPE, 9)
        x = DenseTensor(rng.standard_normal(SHAPE.dims))
        y = rng.standard_normal(12)
        assert np.isclose(
            float(op.apply(x) @ y),
            float(np.sum(op.apply_adjoint(y).array * x.array)),
            rtol=1e-12,
        )

    def test_near_full_sampling(self):
        shape = Shape((2, 2))
        op = sampling(3, shape, 1)
        assert op.ell == 3

    def test_duplicate_indices_rejected(self):
        with pytest.raises(OperatorError):
            SamplingOperator([(1, 1, 1, 1), (1, 1, 1, 1)], SHAPE)

    def test_as_decomposed_matches(self):
        net, g = _net(13)
        op = sampling(9, SHAPE, 17)
        dec = op.as_decomposed(g)
        x = contract_full(net)
        assert np.allclose(dec.apply_to_network(net), op.apply(x), atol=1e-10)

    def test_dense_matrix_rows_one_hot(self):
        op = sampling(5, SHAPE, 19)
        mat = op.as_dense_matrix()
        assert np.all(mat.sum(axis=1) == 1.0)
        rng = np.random.default_rng(4)
        x = DenseTensor(rng.standard_normal(SHAPE.dims))
        assert np.allclose(mat @ x.data, op.apply(x))


class TestDecomposed:
    def test_network_composition_matches_dense(self):
        net, g = _net(23)
        op = gaussian_decomposed(9, SHAPE, g, 2, 29)
        x = contract_full(net)
        dense = op.as_dense_matrix()
        assert np.allclose(op.apply_to_network(net), dense @ x.data, atol=1e-9)

    def test_rank_one_operator_on_rank_one_network(self):
        fam = bbht_family(4)
        g = build_tree(fam)
        net = random_network(g, {e: 1 for e in g.edges}, SHAPE, 31)
        op = gaussian_decomposed(4, SHAPE, g, 1, 37)
        x = contract_full(net)
        assert np.allclose(op.apply_to_network(net), op.as_dense_matrix() @ x.data, atol=1e-10)

    def test_adjoint_contract(self):
        rng = np.random.default_rng(5)
        net, g = _net(41)
        op = gaussian_decomposed(8, SHAPE, g, 2, 43)
        x = DenseTensor(rng.standard_normal(SHAPE.dims))
        y = rng.standard_normal(8)
        assert np.isclose(
            float(op.apply(x) @ y),
            float(np.sum(op.apply_adjoint(y).array * x.array)),
            rtol=1e-10,
        )

    def test_frob_norm_representation_side(self):
        _, g = _net(47)
        op = gaussian_decomposed(7, SHAPE, g, 2, 53)
        dense = op.as_dense_matrix()
        assert np.isclose(op.frob_norm_sq(), float(np.sum(dense**2)), rtol=1e-10)

    def test_multilinearity_in_components(self):
        net, g = _net(59)
        op = gaussian_decomposed(6, SHAPE, g, 1, 61)
        from sumrank.labeled import LTensor

        v0 = min(g.vertices)
        scaled = dict(op.components)
        scaled[v0] = LTensor(2.0 * op.components[v0].data, op.components[v0].labels)
        op2 = DecomposedOperator(g, SHAPE, scaled, op.ranks)
        assert np.allclose(2.0 * op.apply_to_network(net), op2.apply_to_network(net))

    def test_graph_mismatch_rejected(self):
        net, _ = _net(67)
        g_t = build_tree(tucker_family(4))
        op = gaussian_decomposed(5, SHAPE, g_t, 1, 71)
        with pytest.raises(OperatorError):
            op.apply_to_network(net)

    def test_tucker_graph_composition(self):
        fam = tucker_family(4)
        g = build_tree(fam)
        net = random_network(g, {e: 2 for e in g.edges}, SHAPE, 73)
        op = gaussian_decomposed(9, SHAPE, g, 2, 79)
        x = contract_full(net)
        assert np.allclose(op.apply_to_network(net), op.as_dense_matrix() @ x.data, atol=1e-9)


class TestKernelBasis:
    def test_single_row(self):
        shape = Shape((2, 2))
        mat = np.zeros((1, 4))
        mat[0, 0] = 1.0
        op = DenseOperator(mat, shape)
        k = kernel_basis(op)
        assert k.dim == 3
        assert np.allclose(k.basis[0], 0.0)

    def test_gaussian_dimensions(self):
        shape = Shape((5, 5, 5, 5))
        op = gaussian_dense(60, shape, 83)
        k = kernel_basis(op)
        assert k.basis.shape == (625, 565)
        assert np.linalg.norm(op.matrix @ k.basis) <= 1e-10 * np.linalg.norm(op.matrix)
        assert np.allclose(k.basis.T @ k.basis, np.eye(565), atol=1e-12)

    def test_non_dense_rejected(self):
        with pytest.raises(OperatorError):
            kernel_basis(sampling(5, SHAPE, 0))


class TestOperatorIO:
    def test_dense_roundtrip(self, tmp_path):
        op = gaussian_dense(6, SHAPE, 89)
        path = tmp_path / "op.json"
        write_operator(path, op, payload_path=str(tmp_path / "op.srt1"))
        back = read_operator(path)
        assert np.allclose(back.matrix, op.matrix)

    def test_sampling_roundtrip(self, tmp_path):
        op = sampling(7, SHAPE, 97)
        path = tmp_path / "op.json"
        write_operator(path, op)
        back = read_operator(path)
        assert back.indices == op.indices

    def test_decomposed_roundtrip(self, tmp_path):
        net, g = _net(101)
        op = gaussian_decomposed(5, SHAPE, g, 2, 103)
        path = tmp_path / "op.json"
        write_operator(path, op, payload_path=str(tmp_path / "op.bin"))
        back = read_operator(path)
        assert np.allclose(back.apply_to_network(net), op.apply_to_network(net))
