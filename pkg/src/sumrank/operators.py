"""Measurement operators: dense matrices, tree-decomposed operators, sampling.

Every operator maps a tensor to a vector of length ell.  Decomposed operators
carry one component per tree vertex and compose with tree networks without
ever densifying; sampling operators convert to a rank-one decomposed form for
that purpose.
"""

from __future__ import annotations

import json

import numpy as np

from .family import TreeGraph
from .labeled import ZETA, LTensor, alpha, beta, contract, epsilon
from .network import Network
from .tensor import (
    DEFAULT_AMBIENT_CAP,
    DenseTensor,
    Shape,
    null_space,
    read_srt1,
    write_srt1,
)


class OperatorError(ValueError):
    pass


class DenseOperator:
    """Full matrix operator on colex-vectorized tensors; checked surjective."""

    def __init__(self, matrix, shape: Shape, check_surjective=True):
        matrix = np.asarray(matrix, dtype=float)
        if matrix.shape[1] != shape.size():
            raise OperatorError("operator column count does not match the shape")
        self.matrix = matrix
        self.shape = shape
        self.ell = matrix.shape[0]
        if check_surjective:
            sigma = np.linalg.svd(matrix, compute_uv=False)
            if sigma.size == 0 or sigma[-1] <= 1e-10 * sigma[0]:
                raise OperatorError("operator is not surjective")

    def apply(self, x: DenseTensor) -> np.ndarray:
        if x.shape != self.shape:
            raise OperatorError("tensor shape mismatch")
        return self.matrix @ x.data

    def apply_adjoint(self, y) -> DenseTensor:
        y = np.asarray(y, dtype=float)
        return DenseTensor.from_flat(self.matrix.T @ y, self.shape)

    def frob_norm_sq(self):
        return float(np.sum(self.matrix**2))

    def as_dense_matrix(self):
        return self.matrix


class SamplingOperator:
    """Entry evaluation at pairwise distinct 1-based multi-indices."""

    def __init__(self, indices, shape: Shape):
        self.shape = shape
        idx = [tuple(int(i) for i in p) for p in indices]
        if len(set(idx)) != len(idx):
            raise OperatorError("sampling indices must be pairwise distinct")
        for p in idx:
            if len(p) != shape.d or any(not (1 <= p[k] <= shape.dims[k]) for k in range(shape.d)):
                raise OperatorError(f"index {p} outside the shape")
        self.indices = idx
        self.ell = len(idx)
        self._np_index = tuple(
            np.array([p[k] - 1 for p in idx]) for k in range(shape.d)
        )

    def apply(self, x: DenseTensor) -> np.ndarray:
        if x.shape != self.shape:
            raise OperatorError("tensor shape mismatch")
        return x.array[self._np_index]

    def apply_adjoint(self, y) -> DenseTensor:
        y = np.asarray(y, dtype=float)
        arr = np.zeros(self.shape.dims)
        arr[self._np_index] = y
        return DenseTensor(arr)

    def frob_norm_sq(self):
        return float(self.ell)

    def as_decomposed(self, graph: TreeGraph) -> "DecomposedOperator":
        """Rank-one decomposition with one-hot leaf components."""
        comps = {}
        for v in sorted(graph.vertices):
            eps_labels = [epsilon(e) for e in graph.edges_of(v)]
            if v <= graph.d:
                data = np.zeros((self.ell, self.shape.dims[v - 1]) + (1,) * len(eps_labels))
                rows = np.arange(self.ell)
                cols = np.array([p[v - 1] - 1 for p in self.indices])
                data[(rows, cols) + (0,) * len(eps_labels)] = 1.0
                comps[v] = LTensor(data, (ZETA, alpha(v), *eps_labels))
            else:
                comps[v] = LTensor(np.ones((1,) * len(eps_labels)), tuple(eps_labels))
        ranks = {e: 1 for e in graph.edges}
        return DecomposedOperator(graph, self.shape, comps, ranks, check=False)

    def as_dense_matrix(self):
        mat = np.zeros((self.ell, self.shape.size()))
        strides = np.cumprod((1,) + self.shape.dims[:-1])
        for i, p in enumerate(self.indices):
            flat = int(sum((p[k] - 1) * strides[k] for k in range(self.shape.d)))
            mat[i, flat] = 1.0
        return mat


class DecomposedOperator:
    """Operator given by per-vertex components over a tree graph.

    Leaf components carry (zeta, alpha_v, epsilon...) axes, interior
    components only epsilon axes (they are constant in the measurement index).
    """

    def __init__(self, graph: TreeGraph, shape: Shape, components, ranks, check=True):
        self.graph = graph
        self.shape = shape
        self.components = dict(components)
        self.ranks = {frozenset(e): int(r) for e, r in ranks.items()}
        ells = {
            self.components[v].size_of(ZETA)
            for v in graph.vertices
            if ZETA in self.components[v].labels
        }
        if len(ells) != 1:
            raise OperatorError("components disagree on the measurement count")
        self.ell = ells.pop()
        if check:
            for v in graph.vertices:
                comp = self.components[v]
                for e in graph.edges_of(v):
                    if comp.size_of(epsilon(e)) != self.ranks[e]:
                        raise OperatorError(f"component {v} mismatches rank of {sorted(e)}")
                if v <= graph.d and comp.size_of(alpha(v)) != shape.dims[v - 1]:
                    raise OperatorError(f"component {v} mode axis mismatch")

    def apply_to_network(self, network: Network, rows=None) -> np.ndarray:
        f = compose_with_network(self, network, skip=None)
        vec = f.to_vector([ZETA])
        return vec if rows is None else vec[rows]

    def apply(self, x: DenseTensor, cap=DEFAULT_AMBIENT_CAP) -> np.ndarray:
        return self.as_dense_matrix(cap=cap) @ x.data

    def apply_adjoint(self, y, cap=DEFAULT_AMBIENT_CAP) -> DenseTensor:
        y = np.asarray(y, dtype=float)
        return DenseTensor.from_flat(self.as_dense_matrix(cap=cap).T @ y, self.shape)

    def _fold_tree(self, local_of):
        """Contract per-vertex tensors leaves-to-root, batching the zeta axis."""
        graph = self.graph
        root = min(graph.vertices)
        order, _ = graph.order_from(root)
        messages = {}
        for v in order:
            local = local_of(v)
            kids = graph.neigh(v) if v == root else graph.desc(root, v)
            for h in kids:
                local = contract(local, messages.pop(frozenset((v, h))), batch=(ZETA,))
            if v == root:
                return local
            messages[frozenset((v, graph.pred(root, v)))] = local
        raise RuntimeError("unreachable")  # pragma: no cover

    def as_dense_matrix(self, cap=DEFAULT_AMBIENT_CAP):
        size = self.shape.size()
        if size > cap:
            raise MemoryError("dense materialization of the operator refused")
        acc = self._fold_tree(lambda v: self.components[v])
        order = [ZETA] + [alpha(mu) for mu in range(1, self.graph.d + 1)]
        return acc.to_matrix([ZETA], order[1:])

    def frob_norm_sq(self):
        """||L||_F^2 evaluated inside the decomposition."""

        def local_of(v):
            comp = self.components[v]
            other = comp.rename(
                {epsilon(e): ("n", epsilon(e)) for e in self.graph.edges_of(v)}
            )
            return contract(comp, other, batch=(ZETA,))

        acc = self._fold_tree(local_of)
        return float(np.sum(acc.data))


class KernelRep:
    """Orthonormal basis of the kernel of a dense operator."""

    def __init__(self, basis, shape: Shape):
        self.basis = np.asarray(basis, dtype=float)
        self.shape = shape

    @property
    def dim(self):
        return self.basis.shape[1]


def kernel_basis(op) -> KernelRep:
    if not isinstance(op, DenseOperator):
        raise OperatorError("kernel representation requires a dense operator")
    return KernelRep(null_space(op.matrix), op.shape)


def compose_with_network(op: DecomposedOperator, network: Network, skip=None) -> LTensor:
    """Contract operator and network components over the tree.

    With ``skip=c`` the node at c is left out and its component stays open;
    the result then represents the measurement operator composed with the
    network with a hole at c (the node update operator F_c).
    """
    if op.graph.edges != network.graph.edges:
        raise OperatorError("operator and network live on different graphs")
    graph = op.graph
    root = skip if skip is not None else min(graph.vertices)
    order, _ = graph.order_from(root)
    messages = {}
    for v in order:
        if v == root and skip is not None:
            break
        local = contract(op.components[v], network.nodes[v], batch=(ZETA,))
        kids = graph.neigh(v) if v == root else graph.desc(root, v)
        for h in kids:
            local = contract(local, messages.pop(frozenset((v, h))), batch=(ZETA,))
        if v == root:
            return local
        messages[frozenset((v, graph.pred(root, v)))] = local
    # skip-mode: combine the root component with the incoming branch messages
    local = op.components[root]
    for h in graph.neigh(root):
        local = contract(local, messages.pop(frozenset((root, h))), batch=(ZETA,))
    return local


def branch_messages(op: DecomposedOperator, network: Network, root):
    """All branch compositions S^(J_e) oriented away from ``root``.

    S for an edge carries (zeta, beta, epsilon) axes and is the contraction
    of operator and network components over the branch behind the edge.
    """
    graph = op.graph
    order, _ = graph.order_from(root)
    messages = {}
    for v in order:
        if v == root:
            break
        local = contract(op.components[v], network.nodes[v], batch=(ZETA,))
        for h in graph.desc(root, v):
            local = contract(local, messages[frozenset((v, h))], batch=(ZETA,))
        messages[frozenset((v, graph.pred(root, v)))] = local
    return messages


def gaussian_dense(ell, shape: Shape, seed) -> DenseOperator:
    if ell >= shape.size():
        raise OperatorError("dense operators require ell < ambient size")
    rng = np.random.default_rng(seed)
    return DenseOperator(rng.standard_normal((ell, shape.size())), shape)


def gaussian_decomposed(ell, shape: Shape, graph: TreeGraph, rank, seed) -> DecomposedOperator:
    rng = np.random.default_rng(seed)
    if isinstance(rank, int):
        ranks = {e: rank for e in graph.edges}
    else:
        ranks = {frozenset(e): int(r) for e, r in rank.items()}
    comps = {}
    for v in sorted(graph.vertices):
        eps_labels = [epsilon(e) for e in graph.edges_of(v)]
        eps_dims = [ranks[frozenset(l[1:])] for l in eps_labels]
        if v <= graph.d:
            data = rng.standard_normal((ell, shape.dims[v - 1]) + tuple(eps_dims))
            comps[v] = LTensor(data, (ZETA, alpha(v), *eps_labels))
        else:
            comps[v] = LTensor(rng.standard_normal(tuple(eps_dims)), tuple(eps_labels))
    return DecomposedOperator(graph, shape, comps, ranks)


def sampling(ell, shape: Shape, seed) -> SamplingOperator:
    """Uniform sampling without replacement; indices are drawn per mode so the
    ambient size never has to be enumerated."""
    if ell >= shape.size():
        raise OperatorError("sampling requires ell < ambient size")
    rng = np.random.default_rng(seed)
    chosen = []
    seen = set()
    while len(chosen) < ell:
        draw = tuple(int(rng.integers(1, n + 1)) for n in shape.dims)
        if draw not in seen:
            seen.add(draw)
            chosen.append(draw)
    return SamplingOperator(chosen, shape)


# --- file format ---------------------------------------------------------------


def write_operator(path, op, payload_path=None):
    """JSON description; dense payloads go to an SRT1 side file."""
    if isinstance(op, DenseOperator):
        payload = payload_path or str(path) + ".srt1"
        write_srt1(payload, DenseTensor(op.matrix))
        doc = {"variant": "dense", "shape": list(op.shape.dims), "payload": payload}
    elif isinstance(op, SamplingOperator):
        doc = {
            "variant": "sampling",
            "shape": list(op.shape.dims),
            "indices": [list(p) for p in op.indices],
        }
    elif isinstance(op, DecomposedOperator):
        from .network import write_network  # reuse of the node payload scheme

        doc = {
            "variant": "decomposed",
            "shape": list(op.shape.dims),
            "graph": op.graph.to_json(),
            "ranks": {",".join(map(str, sorted(e))): r for e, r in op.ranks.items()},
            "components": [],
        }
        payload = payload_path or str(path) + ".bin"
        import struct

        with open(payload, "wb") as fh:
            for v in sorted(op.graph.vertices):
                comp = op.components[v]
                doc["components"].append({
                    "vertex": v,
                    "labels": [list(l) if isinstance(l, tuple) else l for l in comp.labels],
                    "dims": list(comp.data.shape),
                })
                fh.write(comp.data.reshape(-1, order="F").astype("<f8").tobytes())
        doc["payload"] = payload
    else:
        raise OperatorError(f"unknown operator type {type(op)!r}")
    with open(path, "w") as fh:
        json.dump(doc, fh)


def read_operator(path):
    with open(path) as fh:
        doc = json.load(fh)
    shape = Shape(doc["shape"])
    if doc["variant"] == "dense":
        x = read_srt1(doc["payload"])
        return DenseOperator(x.array.reshape(x.shape.dims[0], -1, order="F"), shape)
    if doc["variant"] == "sampling":
        return SamplingOperator([tuple(p) for p in doc["indices"]], shape)
    if doc["variant"] == "decomposed":
        from .family import TreeGraph as TG

        gdoc = doc["graph"]
        edge_subset = {tuple(map(int, k.split(","))): v for k, v in gdoc["edge_subset"].items()}
        graph = TG(gdoc["d"], gdoc["vertices"], gdoc["edges"], edge_subset)
        ranks = {tuple(map(int, k.split(","))): r for k, r in doc["ranks"].items()}
        comps = {}
        with open(doc["payload"], "rb") as fh:
            for meta in doc["components"]:
                dims = meta["dims"]
                count = int(np.prod(dims, dtype=np.int64))
                data = np.frombuffer(fh.read(count * 8), dtype="<f8")
                labels = [tuple(l) if isinstance(l, list) else l for l in meta["labels"]]
                comps[meta["vertex"]] = LTensor(
                    np.array(data).reshape(dims, order="F"), labels
                )
        return DecomposedOperator(graph, shape, comps, ranks)
    raise OperatorError(f"unknown operator variant {doc['variant']}")
