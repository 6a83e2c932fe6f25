"""Label-indexed dense arrays and their contractions.

Tree network code never tracks axis positions by hand; every axis carries a
hashable label (mode axes, edge axes, the measurement axis) and contractions
pair up equal labels.  Labels marked as batch labels are matched elementwise
instead of being summed, which is how the measurement index behaves in
operator compositions.
"""

from __future__ import annotations

import numpy as np

ZETA = "zeta"


def alpha(v):
    """Label of the open mode axis at vertex v."""
    return ("a", v)


def beta(e):
    """Label of the rank axis of edge e (an unordered vertex pair)."""
    v, w = sorted(e)
    return ("b", v, w)


def epsilon(e):
    """Label of the operator rank axis of edge e."""
    v, w = sorted(e)
    return ("e", v, w)


def primed(label):
    return ("p", label)


class LTensor:
    """A dense array together with one hashable label per axis."""

    __slots__ = ("data", "labels")

    def __init__(self, data, labels):
        data = np.asarray(data, dtype=float)
        labels = tuple(labels)
        if data.ndim != len(labels):
            raise ValueError(f"{data.ndim} axes but {len(labels)} labels")
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate labels in {labels}")
        self.data = data
        self.labels = labels

    def size_of(self, label):
        return self.data.shape[self.labels.index(label)]

    def rename(self, mapping):
        return LTensor(self.data, tuple(mapping.get(l, l) for l in self.labels))

    def transpose_to(self, labels):
        labels = tuple(labels)
        if set(labels) != set(self.labels):
            raise ValueError("label sets differ")
        perm = [self.labels.index(l) for l in labels]
        return LTensor(np.transpose(self.data, perm), labels)

    def to_matrix(self, row_labels, col_labels):
        """Group axes into a matrix; each group is flattened colexicographically."""
        t = self.transpose_to(tuple(row_labels) + tuple(col_labels))
        rows = int(np.prod(t.data.shape[: len(row_labels)], dtype=np.int64)) if row_labels else 1
        cols = t.data.size // rows
        return t.data.reshape(rows, cols, order="F")

    def to_vector(self, labels):
        return self.to_matrix(tuple(labels), ()).reshape(-1)

    def copy(self):
        return LTensor(self.data.copy(), self.labels)

    def __repr__(self):
        return f"LTensor(labels={self.labels}, shape={self.data.shape})"


def from_matrix(matrix, row_labels, row_shape, col_labels, col_shape):
    arr = np.asarray(matrix, dtype=float).reshape(tuple(row_shape) + tuple(col_shape), order="F")
    return LTensor(arr, tuple(row_labels) + tuple(col_labels))


def from_vector(vec, labels, shape):
    arr = np.asarray(vec, dtype=float).reshape(tuple(shape), order="F")
    return LTensor(arr, tuple(labels))


def contract(a: LTensor, b: LTensor, batch=()) -> LTensor:
    """Contract all labels shared by ``a`` and ``b``; batch labels stay open."""
    batch = set(batch)
    shared = set(a.labels) & set(b.labels)
    ids = {}

    def id_of(label):
        return ids.setdefault(label, len(ids))

    sub_a = [id_of(l) for l in a.labels]
    sub_b = [id_of(l) for l in b.labels]
    out_labels = [l for l in a.labels if l not in shared or l in batch]
    out_labels += [l for l in b.labels if l not in shared]
    sub_out = [id_of(l) for l in out_labels]
    data = np.einsum(a.data, sub_a, b.data, sub_b, sub_out, optimize=True)
    return LTensor(data, tuple(out_labels))


def contract_many(tensors, batch=()) -> LTensor:
    result = None
    for t in tensors:
        result = t if result is None else contract(result, t, batch=batch)
    if result is None:
        raise ValueError("nothing to contract")
    return result
