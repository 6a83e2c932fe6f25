"""Tree tensor networks: contraction, orthonormalization and root shifting.

A network stores one node per tree vertex.  Leaf nodes carry the open mode
axis, every node carries one rank axis per incident edge.  The represented
tensor is the contraction over all shared edge axes.
"""

from __future__ import annotations

import numpy as np

from .family import FamilyError, TreeGraph, is_feasible
from .labeled import LTensor, alpha, beta, contract, from_matrix, primed
from .tensor import DEFAULT_AMBIENT_CAP, DenseTensor, Shape, qr_nonneg


class Network:
    """Nodes of a tree tensor network plus the current orthonormal root."""

    def __init__(self, graph: TreeGraph, shape: Shape, nodes, ortho_root=None):
        self.graph = graph
        self.shape = shape
        self.nodes = dict(nodes)
        self.ortho_root = ortho_root
        for v in graph.vertices:
            if v not in self.nodes:
                raise ValueError(f"node for vertex {v} missing")
            self._check_node(v)

    def _check_node(self, v):
        node = self.nodes[v]
        expected = set(node_labels(self.graph, v))
        if set(node.labels) != expected:
            raise ValueError(f"node {v} has labels {node.labels}, expected {expected}")
        if v <= self.graph.d and node.size_of(alpha(v)) != self.shape.dims[v - 1]:
            raise ValueError(f"node {v} mode axis does not match the shape")

    def rank(self, e):
        e = frozenset(e)
        v = next(iter(e))
        return self.nodes[v].size_of(beta(e))

    def ranks(self):
        return {e: self.rank(e) for e in self.graph.edges}

    def copy(self):
        return Network(
            self.graph, self.shape, {v: n.copy() for v, n in self.nodes.items()}, self.ortho_root
        )

    def node_dim(self, v):
        return self.nodes[v].data.size

    def frob_norm(self):
        """Frobenius norm of the represented tensor, without densifying."""
        if self.ortho_root is not None:
            return float(np.linalg.norm(self.nodes[self.ortho_root].data))
        return float(np.sqrt(max(network_inner(self, self), 0.0)))

    def __repr__(self):
        return f"Network(d={self.graph.d}, ranks={[(sorted(e), r) for e, r in self.ranks().items()]})"


def node_labels(graph: TreeGraph, v):
    labels = []
    if v <= graph.d:
        labels.append(alpha(v))
    labels.extend(beta(e) for e in graph.edges_of(v))
    return tuple(labels)


def random_network(graph: TreeGraph, ranks, shape: Shape, seed) -> Network:
    """Network with i.i.d. standard normal node entries."""
    if hasattr(ranks, "as_edge_dict"):
        edge_ranks = ranks.as_edge_dict(graph)
    else:
        edge_ranks = {frozenset(e): int(r) for e, r in ranks.items()}
    if not is_feasible(edge_ranks, shape, graph):
        raise FamilyError("rank vector is infeasible")
    rng = np.random.default_rng(seed)
    nodes = {}
    for v in sorted(graph.vertices):
        labels = node_labels(graph, v)
        dims = []
        for lab in labels:
            if lab[0] == "a":
                dims.append(shape.dims[v - 1])
            else:
                dims.append(edge_ranks[frozenset(lab[1:])])
        nodes[v] = LTensor(rng.standard_normal(dims), labels)
    return Network(graph, shape, nodes)


def cp_tensor(factors) -> DenseTensor:
    """Sum of elementary tensors with the given factor columns."""
    factors = [np.asarray(f, dtype=float) for f in factors]
    r = factors[0].shape[1]
    if any(f.shape[1] != r for f in factors):
        raise ValueError("all factors need the same column count")
    ids = list(range(len(factors)))
    args = []
    for mu, f in enumerate(factors):
        args.extend([f, [mu, len(factors)]])
    args.append(ids)
    return DenseTensor(np.einsum(*args))


def contract_subset(network: Network, subset) -> LTensor:
    """Contract the nodes of a connected vertex set over its interior edges."""
    subset = set(subset)
    if not subset <= network.graph.vertices:
        raise KeyError("subset contains unknown vertices")
    start = next(iter(subset))
    seen = {start}
    stack = [start]
    order = [start]
    while stack:
        v = stack.pop()
        for h in network.graph.neigh(v) & subset - seen:
            seen.add(h)
            stack.append(h)
            order.append(h)
    if seen != subset:
        raise ValueError("vertex subset is not connected")
    result = network.nodes[order[0]]
    remaining = order[1:]
    while remaining:
        for i, v in enumerate(remaining):
            if set(result.labels) & set(network.nodes[v].labels):
                result = contract(result, network.nodes[v])
                remaining.pop(i)
                break
        else:  # pragma: no cover - connectivity already checked
            raise ValueError("vertex subset is not connected")
    return result


def contract_all_but(network: Network, c) -> LTensor:
    """Contraction of every node except c (branch-wise outer product).

    The open labels are all mode axes away from c plus the edge axes of c;
    composed with the node at c this reproduces the full contraction.
    """
    result = None
    for h in sorted(network.graph.neigh(c)):
        t = contract_subset(network, network.graph.branch(c, h))
        result = t if result is None else contract(result, t)
    return result


def insertion_matrix(network: Network, c) -> np.ndarray:
    """Dense matrix mapping a colex-vectorized node at c to the full tensor."""
    open_net = contract_all_but(network, c)
    labels = network.nodes[c].labels
    if c <= network.graph.d:
        n_c = network.shape.dims[c - 1]
        eye = LTensor(np.eye(n_c), (alpha(c), ("tmp", c)))
        open_net = contract(open_net, eye)
        cols = [("tmp", c) if l == alpha(c) else l for l in labels]
    else:
        cols = list(labels)
    rows = [alpha(mu) for mu in range(1, network.graph.d + 1)]
    return open_net.to_matrix(rows, cols)


def contract_full(network: Network, cap=DEFAULT_AMBIENT_CAP) -> DenseTensor:
    """Densify the represented tensor; refuses above the ambient cap."""
    size = network.shape.size()
    if size > cap:
        raise MemoryError(f"ambient size {size} exceeds cap {cap}")
    full = contract_subset(network, network.graph.vertices)
    order = [alpha(mu) for mu in range(1, network.graph.d + 1)]
    return DenseTensor(full.transpose_to(order).data)


def branch_matrices(network: Network, e):
    """(Y, Z) with matricize(X, J_e) = Y @ Z, built by dense branch contraction."""
    e = frozenset(e)
    subset = network.graph.edge_subset[e]
    v, w = tuple(e)
    v_side = network.graph.leaf_set(w, v)
    y_vertex = v if v_side == subset else w
    z_vertex = w if y_vertex == v else v
    y_branch = network.graph.branch(z_vertex, y_vertex)
    z_branch = network.graph.branch(y_vertex, z_vertex)
    y_t = contract_subset(network, y_branch)
    z_t = contract_subset(network, z_branch)
    row_labels = [alpha(mu) for mu in subset.members]
    col_labels = [alpha(mu) for mu in subset.complement().members]
    y = y_t.to_matrix(row_labels, [beta(e)])
    z = z_t.to_matrix([beta(e)], col_labels)
    return y, z


def network_inner(a: Network, b: Network) -> float:
    """Inner product of two represented tensors living on the same graph."""
    if a.graph is not b.graph and a.graph.edges != b.graph.edges:
        raise ValueError("networks live on different graphs")
    root = min(a.graph.vertices)
    order, _ = a.graph.order_from(root)
    messages = {}
    for v in order:
        ta = a.nodes[v]
        tb = b.nodes[v].rename({beta(e): primed(beta(e)) for e in a.graph.edges_of(v)})
        acc = contract(ta, tb)
        if v == root:
            kids = a.graph.neigh(v)
        else:
            kids = a.graph.desc(root, v)
        for h in kids:
            acc = contract(acc, messages.pop(frozenset((v, h))))
        if v == root:
            return float(acc.data)
        e_up = frozenset((v, a.graph.pred(root, v)))
        messages[e_up] = acc
    raise RuntimeError("unreachable")  # pragma: no cover


def network_distance(a: Network, b: Network) -> float:
    """Frobenius distance between two represented tensors, representation side."""
    sq = network_inner(a, a) - 2.0 * network_inner(a, b) + network_inner(b, b)
    return float(np.sqrt(max(sq, 0.0)))


def _push_matrix(network: Network, matrix, e, target):
    """Replace N_target by matrix applied to its beta(e) axis (rows are new)."""
    lab = beta(e)
    tmp = ("tmp-beta",)
    m = LTensor(np.asarray(matrix, dtype=float), (tmp, lab))
    network.nodes[target] = contract(m, network.nodes[target]).rename({tmp: lab})


def orthonormalize(network: Network, c, inplace=False) -> Network:
    """QR sweep from the leaves toward c; the represented tensor is unchanged."""
    net = network if inplace else network.copy()
    order, _ = net.graph.order_from(c)
    for v in order:
        if v == c:
            continue
        pred = net.graph.pred(c, v)
        e = frozenset((v, pred))
        node = net.nodes[v]
        rest = [l for l in node.labels if l != beta(e)]
        mat = node.to_matrix(rest, [beta(e)])
        if mat.shape[0] < mat.shape[1]:
            raise FamilyError(
                f"edge {sorted(e)} rank {mat.shape[1]} is infeasible at vertex {v}"
            )
        q, r = qr_nonneg(mat)
        shape_rest = [node.size_of(l) for l in rest]
        net.nodes[v] = from_matrix(q, rest, shape_rest, [beta(e)], [q.shape[1]])
        _push_matrix(net, r, e, pred)
    net.ortho_root = c
    return net


class RankAdaptPolicy:
    """Adapt edge ranks so exactly two singular values sit below sqrt(gamma)/2."""

    def __init__(self, r_min=1, r_max=None, grow_scale=1e-2, truncate_only=False):
        self.r_min = int(r_min)
        self.r_max = r_max if r_max is None else int(r_max)
        self.grow_scale = float(grow_scale)
        self.truncate_only = truncate_only

    def target_rank(self, sigma, gamma):
        thresh = 0.5 * np.sqrt(gamma)
        significant = int(np.sum(sigma >= thresh))
        r = significant + 2
        r = max(r, self.r_min)
        if self.r_max is not None:
            r = min(r, self.r_max)
        return r


def _edge_rank_cap(network: Network, e):
    """Largest feasible rank of edge e given the other current edge ranks."""
    cap = None
    for v in e:
        n_v = network.shape.dims[v - 1] if v <= network.graph.d else 1
        prod = n_v
        for other in network.graph.edges_of(v):
            if other != e:
                prod *= network.rank(other)
        cap = prod if cap is None else min(cap, prod)
    return cap


def root_shift(network: Network, c_old, c_new, adapt=None, gamma=None, inplace=False,
               rng=None, collect_sigma=None):
    """Move the orthonormal root from c_old to its (possibly distant) neighbor.

    Each path edge is re-gauged by an SVD of the current root node: the left
    factor stays, the scaled right factor moves forward, so the represented
    tensor only changes when ranks are truncated.  With an adaption policy the
    edge rank follows the sqrt(gamma)/2 rule within feasibility bounds.
    """
    if network.ortho_root != c_old:
        raise ValueError("network is not orthonormalized at c_old")
    net = network if inplace else network.copy()
    if c_new not in net.graph.vertices:
        raise KeyError(f"vertex {c_new} not in graph")
    if c_new == c_old:
        net.ortho_root = c_old
        return net
    path = net.graph.path_inclusive(c_old, c_new)
    rng = np.random.default_rng(0) if rng is None and adapt is not None else rng
    for u, w in zip(path[:-1], path[1:]):
        e = frozenset((u, w))
        node = net.nodes[u]
        rest = [l for l in node.labels if l != beta(e)]
        mat = node.to_matrix(rest, [beta(e)])
        u_mat, sigma, vt = np.linalg.svd(mat, full_matrices=False)
        if collect_sigma is not None:
            collect_sigma[e] = sigma.copy()
        push = sigma[:, None] * vt
        if adapt is not None:
            r_new = adapt.target_rank(sigma, gamma)
            r_new = min(r_new, _edge_rank_cap(net, e), mat.shape[0])
            r_new = max(r_new, 1)
            r_cur = sigma.size
            if adapt.truncate_only:
                r_new = min(r_new, r_cur)
            if r_new < r_cur:
                u_mat = u_mat[:, :r_new]
                push = push[:r_new]
            elif r_new > r_cur:
                extra = rng.standard_normal((mat.shape[0], r_new - r_cur))
                extra *= 0.5 * np.sqrt(gamma) * adapt.grow_scale
                u_mat, _ = qr_nonneg(np.column_stack([u_mat, extra]))
                push = np.vstack([push, np.zeros((r_new - r_cur, push.shape[1]))])
        shape_rest = [node.size_of(l) for l in rest]
        net.nodes[u] = from_matrix(u_mat, rest, shape_rest, [beta(e)], [u_mat.shape[1]])
        _push_matrix(net, push, e, w)
    net.ortho_root = c_new
    return net


def gram_z(network: Network, e):
    """H = Z Z^T for edge e oriented away from the orthonormal root.

    Evaluated entirely inside the representation: the root node supplies the
    root-incident Gram matrices, deeper edges follow by sandwiching through
    the path nodes.
    """
    c = network.ortho_root
    if c is None:
        raise ValueError("network is not orthonormalized")
    e = frozenset(e)
    v, w = tuple(e)
    far = v if c not in network.graph.branch(w, v) else w
    near = w if far == v else v
    chain = network.graph.path_inclusive(c, far)  # c, ..., near, far
    root_node = network.nodes[c]
    first_edge = frozenset((c, chain[1]))
    h = _self_gram(root_node, beta(first_edge))
    walked = first_edge
    for j in range(1, len(chain) - 1):
        node_v = chain[j]
        next_edge = frozenset((chain[j], chain[j + 1]))
        h = _sandwich(network.nodes[node_v], h, beta(walked), beta(next_edge))
        walked = next_edge
    return h


def _self_gram(node: LTensor, open_label):
    other = node.rename({open_label: primed(open_label)})
    out = contract(other, node)
    return out.to_matrix([primed(open_label)], [open_label])


def _sandwich(node: LTensor, matrix, parent_label, child_label):
    """Contract two copies of a node through ``matrix`` living on the parent edge.

    The copies share every axis except the parent and child edge axes; the
    result is a matrix on the child edge (primed rows, unprimed columns).
    """
    m = LTensor(np.asarray(matrix, dtype=float), (primed(parent_label), parent_label))
    upper = node.rename({parent_label: primed(parent_label), child_label: primed(child_label)})
    half = contract(upper, m)
    out = contract(half, node)
    return out.to_matrix([primed(child_label)], [child_label])


# --- file format --------------------------------------------------------------

import json
import struct


def write_network(path, network: Network):
    """JSON header plus one float64 payload per node in declared label order."""
    header = {
        "graph": network.graph.to_json(),
        "shape": list(network.shape.dims),
        "ranks": {",".join(map(str, sorted(e))): r for e, r in network.ranks().items()},
        "nodes": [],
        "ortho_root": network.ortho_root,
    }
    payloads = []
    for v in sorted(network.graph.vertices):
        node = network.nodes[v]
        header["nodes"].append({
            "vertex": v,
            "labels": [list(l) for l in node.labels],
            "dims": list(node.data.shape),
        })
        payloads.append(node.data.reshape(-1, order="F").astype("<f8").tobytes())
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for p in payloads:
            fh.write(p)


def read_network(path) -> Network:
    from .family import TreeGraph as TG

    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        graph_doc = header["graph"]
        edge_subset = {
            tuple(map(int, k.split(","))): v for k, v in graph_doc["edge_subset"].items()
        }
        graph = TG(graph_doc["d"], graph_doc["vertices"], graph_doc["edges"], edge_subset)
        shape = Shape(header["shape"])
        nodes = {}
        for meta in header["nodes"]:
            dims = meta["dims"]
            count = int(np.prod(dims, dtype=np.int64))
            data = np.frombuffer(fh.read(count * 8), dtype="<f8")
            labels = [tuple(l) for l in meta["labels"]]
            nodes[meta["vertex"]] = LTensor(
                np.array(data).reshape(dims, order="F"), labels
            )
    return Network(graph, shape, nodes, header.get("ortho_root"))
