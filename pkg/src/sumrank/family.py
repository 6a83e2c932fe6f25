"""Families of mode subsets, their trees, feasibility and variety dimensions.

A hierarchical family pairs every two of its subsets as nested or disjoint and
never contains a complement pair.  Each such family that also separates the
modes corresponds to a unique tree whose vertices contain the modes 1..d and
whose edges are labelled by the subsets.
"""

from __future__ import annotations

import itertools
import json

from .tensor import ModeSubset, Shape, as_subset


class FamilyError(ValueError):
    """The family violates hierarchy or cannot be arranged into a tree."""


class Family:
    """A set of mode subsets over [d]; hierarchy is not enforced here."""

    def __init__(self, d, subsets):
        self.d = int(d)
        subs = [as_subset(s, self.d) for s in subsets]
        seen = set()
        self.subsets = []
        for s in subs:
            if s in seen:
                continue
            seen.add(s)
            self.subsets.append(s)
        if not self.subsets:
            raise FamilyError("family must be nonempty")

    def __iter__(self):
        return iter(self.subsets)

    def __len__(self):
        return len(self.subsets)

    def __contains__(self, subset):
        return as_subset(subset, self.d) in set(self.subsets)

    def __eq__(self, other):
        return (
            isinstance(other, Family)
            and self.d == other.d
            and set(self.subsets) == set(other.subsets)
        )

    def key_of(self, subset):
        return as_subset(subset, self.d)

    def to_json(self):
        return {"d": self.d, "subsets": [list(s.members) for s in self.subsets]}

    @classmethod
    def from_json(cls, doc):
        return cls(doc["d"], doc["subsets"])

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))

    def __repr__(self):
        return f"Family(d={self.d}, subsets={[s.members for s in self.subsets]})"


def validate(family: Family):
    """Check the pairwise hierarchy condition; returns (ok, violations)."""
    violations = []
    subs = family.subsets
    for i, j_a in enumerate(subs):
        set_a = set(j_a.members)
        for j_b in subs[i:]:
            set_b = set(j_b.members)
            if set_a | set_b == set(range(1, family.d + 1)) and not (set_a & set_b):
                violations.append((j_a.members, j_b.members, "complement pair"))
                continue
            if j_a is j_b:
                continue
            nested = set_a <= set_b or set_b <= set_a
            disjoint = not (set_a & set_b)
            if not (nested or disjoint):
                violations.append((j_a.members, j_b.members, "overlap without nesting"))
    return (not violations, violations)


def merge_equivalent_modes(family: Family):
    """Pairs of modes no subset of the family separates."""
    pairs = []
    for mu, nu in itertools.combinations(range(1, family.d + 1), 2):
        if all((mu in s) == (nu in s) for s in family.subsets):
            pairs.append((mu, nu))
    return pairs


class TreeGraph:
    """Tree with vertices containing [d] and one family subset per edge."""

    def __init__(self, d, vertices, edges, edge_subset):
        self.d = int(d)
        self.vertices = frozenset(int(v) for v in vertices)
        self.edges = frozenset(frozenset(e) for e in edges)
        self.edge_subset = {frozenset(e): as_subset(s, self.d) for e, s in edge_subset.items()}
        if set(range(1, self.d + 1)) - self.vertices:
            raise FamilyError("vertices must contain all modes")
        if len(self.edges) != len(self.vertices) - 1:
            raise FamilyError("edge count must be vertex count minus one")
        self._adj = {v: set() for v in self.vertices}
        for e in self.edges:
            v, w = tuple(e)
            self._adj[v].add(w)
            self._adj[w].add(v)
        self._check_connected()
        self._branch_cache = {}

    def _check_connected(self):
        seen = set()
        stack = [next(iter(self.vertices))]
        while stack:
            v = stack.pop()
            if v in seen:
                continue
            seen.add(v)
            stack.extend(self._adj[v] - seen)
        if seen != self.vertices:
            raise FamilyError("graph is not connected")

    # -- queries ------------------------------------------------------------

    def neigh(self, v):
        if v not in self.vertices:
            raise KeyError(f"vertex {v} not in graph")
        return set(self._adj[v])

    def degree(self, v):
        return len(self.neigh(v))

    def edges_of(self, v):
        return [frozenset((v, h)) for h in sorted(self._adj[v])]

    def path(self, c, v):
        """Vertices strictly between c and v along the unique path."""
        full = self.path_inclusive(c, v)
        return tuple(full[1:-1])

    def path_inclusive(self, c, v):
        if c not in self.vertices or v not in self.vertices:
            raise KeyError("vertex not in graph")
        if c == v:
            return (c,)
        prev = {c: None}
        stack = [c]
        while stack:
            u = stack.pop()
            if u == v:
                break
            for h in self._adj[u]:
                if h not in prev:
                    prev[h] = u
                    stack.append(h)
        out = [v]
        while out[-1] != c:
            out.append(prev[out[-1]])
        return tuple(reversed(out))

    def pred(self, c, v):
        """Neighbor of v on the path toward c."""
        if v == c:
            raise ValueError("root has no predecessor")
        full = self.path_inclusive(c, v)
        return full[-2]

    def desc(self, c, v):
        return self.neigh(v) - {self.pred(c, v)}

    def branch(self, c, v):
        """Subtree hanging below v when the tree is rooted at c.

        Equivalently the component of v after removing its predecessor, so
        for neighbors of c this is the component of v without c.
        """
        key = (c, v)
        if key in self._branch_cache:
            return self._branch_cache[key]
        if v == c:
            raise ValueError("branch is relative to a distinct root")
        pred = self.pred(c, v)
        seen = {pred, v}
        stack = [v]
        while stack:
            u = stack.pop()
            for h in self._adj[u]:
                if h not in seen:
                    seen.add(h)
                    stack.append(h)
        out = frozenset(seen - {pred})
        self._branch_cache[key] = out
        return out

    def leaf_set(self, c, v):
        """J_c(v): the modes inside branch_c(v)."""
        modes = tuple(sorted(m for m in self.branch(c, v) if m <= self.d))
        return ModeSubset(modes, self.d)

    def edge_sets(self, s):
        """(E_S, interior E_S, boundary E_S) for a vertex set S."""
        s = set(s)
        e_s = {e for e in self.edges if set(e) & s}
        interior = {e for e in e_s if set(e) <= s}
        return e_s, interior, e_s - interior

    def vertex_for_edge_direction(self, c, subset):
        """Vertex v with J_c(v) = subset, for subset in the family K^{S_c}."""
        subset = as_subset(subset, self.d)
        for v in self.vertices:
            if v == c:
                continue
            if self.leaf_set(c, v) == subset:
                return v
        raise KeyError(f"no branch of root {c} has leaf set {subset.members}")

    def order_from(self, c):
        """Vertices sorted by decreasing distance from c (leaves first)."""
        dist = {c: 0}
        frontier = [c]
        while frontier:
            nxt = []
            for v in frontier:
                for h in self._adj[v]:
                    if h not in dist:
                        dist[h] = dist[v] + 1
                        nxt.append(h)
            frontier = nxt
        return sorted(self.vertices, key=lambda v: (-dist[v], v)), dist

    def euler_tour(self, c):
        """Depth-first closed walk from c; consecutive entries are adjacent."""
        tour = []

        def visit(v, parent):
            tour.append(v)
            for h in sorted(self._adj[v]):
                if h != parent:
                    visit(h, v)
                    tour.append(v)

        visit(c, None)
        return tour

    def family(self):
        return Family(self.d, list(self.edge_subset.values()))

    def to_json(self):
        return {
            "d": self.d,
            "vertices": sorted(self.vertices),
            "edges": [sorted(e) for e in sorted(self.edges, key=sorted)],
            "edge_subset": {
                ",".join(map(str, sorted(e))): list(s.members)
                for e, s in self.edge_subset.items()
            },
        }

    def __repr__(self):
        return f"TreeGraph(d={self.d}, vertices={sorted(self.vertices)})"


def build_tree(family: Family) -> TreeGraph:
    """Arrange a hierarchical, mode-separating family into its tree."""
    ok, violations = validate(family)
    if not ok:
        raise FamilyError(f"family is not hierarchical: {violations}")

    d = family.d
    anchor = d  # the tree is rooted at the vertex of mode d during construction
    normalized = {}
    for s in family.subsets:
        norm = s if anchor not in s else s.complement()
        if norm in normalized:
            raise FamilyError(f"subsets {s.members} and {normalized[norm].members} coincide")
        normalized[norm] = s

    sets = sorted(normalized, key=lambda s: (len(s.members), s.members))
    parent = {}
    for s in sets:
        candidates = [t for t in sets if t is not s and set(s.members) < set(t.members)]
        parent[s] = min(candidates, key=lambda t: len(t.members)) if candidates else None

    children = {s: [] for s in sets}
    top = []
    for s in sets:
        if parent[s] is None:
            top.append(s)
        else:
            children[parent[s]].append(s)

    def residual(s, kids):
        return set(s.members) - set().union(*(set(k.members) for k in kids)) if kids else set(s.members)

    vertex_of = {}
    interior = []
    for s in sets:
        res = residual(s, children[s])
        if len(res) > 1:
            raise FamilyError(f"modes {sorted(res)} are not separated by the family")
        if len(res) == 1:
            vertex_of[s] = res.pop()
        else:
            interior.append(s)
    root_res = set(range(1, d)) - set().union(set(), *(set(t.members) for t in top))
    if root_res:
        raise FamilyError(f"modes {sorted(root_res)} are not separated by the family")

    for k, s in enumerate(sorted(interior, key=lambda s: (min(s.members), len(s.members), s.members))):
        vertex_of[s] = d + 1 + k

    vertices = {anchor} | set(vertex_of.values())
    edges = []
    edge_subset = {}
    for s in sets:
        v = vertex_of[s]
        w = anchor if parent[s] is None else vertex_of[parent[s]]
        edges.append((v, w))
        edge_subset[(v, w)] = normalized[s]
    return TreeGraph(d, vertices, edges, edge_subset)


def complementary_family(family: Family, replaced) -> Family:
    """K^S: replace every subset in ``replaced`` by its complement."""
    repl = {as_subset(s, family.d) for s in replaced}
    unknown = repl - set(family.subsets)
    if unknown:
        raise FamilyError(f"{[s.members for s in unknown]} not in the family")
    out = []
    for s in family.subsets:
        out.append(s.complement() if s in repl else s)
    return Family(family.d, out)


def root_subset(graph: TreeGraph, c):
    """S_c plus the map from each subset of K^{S_c} to its vertex.

    Returns ``(s_c, oriented, vertex_of)`` where ``oriented[e]`` is the edge
    subset pointing away from c and ``vertex_of`` maps it to the far vertex.
    """
    if c not in graph.vertices:
        raise KeyError(f"vertex {c} not in graph")
    s_c = []
    oriented = {}
    vertex_of = {}
    for e in graph.edges:
        v, w = tuple(e)
        far = v if c not in graph.branch(w, v) else w
        away = graph.leaf_set(c, far)
        if graph.edge_subset[e] != away:
            s_c.append(graph.edge_subset[e])
        oriented[e] = away
        vertex_of[away] = far
    return s_c, oriented, vertex_of


class RankVector:
    """Edge ranks indexed by the family subsets."""

    def __init__(self, family: Family, values):
        self.family = family
        if isinstance(values, int):
            values = {s: values for s in family.subsets}
        self.values = {family.key_of(k): int(v) for k, v in values.items()}
        missing = set(family.subsets) - set(self.values)
        if missing:
            raise FamilyError(f"ranks missing for {[s.members for s in missing]}")
        if any(v < 1 for v in self.values.values()):
            raise FamilyError("ranks must be positive")

    def __getitem__(self, subset):
        return self.values[self.family.key_of(subset)]

    def as_edge_dict(self, graph: TreeGraph):
        return {e: self.values[s] for e, s in graph.edge_subset.items()}


def is_feasible(ranks, shape: Shape, graph: TreeGraph) -> bool:
    """Per-vertex product bounds for realizable rank vectors."""
    edge_ranks = ranks.as_edge_dict(graph) if isinstance(ranks, RankVector) else {
        frozenset(e): int(r) for e, r in ranks.items()
    }
    for v in graph.vertices:
        n_v = shape.dims[v - 1] if v <= graph.d else 1
        incident = graph.edges_of(v)
        for e_hat in incident:
            bound = n_v
            for e in incident:
                if e != e_hat:
                    bound *= edge_ranks[e]
            if edge_ranks[e_hat] > bound:
                return False
    return True


def variety_dim(ranks, shape: Shape, graph: TreeGraph) -> int:
    """Dimension of the variety of tensors with matricization ranks <= r."""
    edge_ranks = ranks.as_edge_dict(graph) if isinstance(ranks, RankVector) else {
        frozenset(e): int(r) for e, r in ranks.items()
    }
    if not is_feasible(edge_ranks, shape, graph):
        raise FamilyError("rank vector is infeasible for this shape")
    total = 0
    for v in graph.vertices:
        prod = 1
        for e in graph.edges_of(v):
            prod *= edge_ranks[e]
        if v <= graph.d:
            total += shape.dims[v - 1] * prod
        else:
            total += prod
    total -= sum(r * r for r in edge_ranks.values())
    return int(total)


def tucker_family(d) -> Family:
    return Family(d, [(mu,) for mu in range(1, d + 1)])


def bbht_family(d) -> Family:
    """Exhaustive family whose tree minimizes the maximal leaf distance.

    Blocks of modes are halved recursively (left half gets the ceiling); the
    block complementary to the first split is dropped so no complement pair
    appears.
    """
    if d < 2:
        raise ValueError("need d >= 2")
    subsets = []

    def split(lo, hi):
        if lo == hi:
            subsets.append((lo,))
            return
        mid = lo + (hi - lo + 1 + 1) // 2 - 1
        subsets.append(tuple(range(lo, hi + 1)))
        split(lo, mid)
        split(mid + 1, hi)

    mid = (d + 1) // 2
    split(1, mid)
    if mid < d:
        split(mid + 1, d)
        subsets.remove(tuple(range(mid + 1, d + 1)))
    subsets = [s for s in subsets if len(s) < d]
    return Family(d, subsets)


def is_exhaustive(family: Family) -> bool:
    """True iff the tree has only degree-3 interior vertices and mode leaves."""
    try:
        graph = build_tree(family)
    except FamilyError:
        return False
    for v in graph.vertices:
        if v <= family.d:
            if graph.degree(v) != 1:
                return False
        elif graph.degree(v) != 3:
            return False
    return True
