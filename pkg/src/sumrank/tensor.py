"""Dense tensors, matricizations and the shared dense linear algebra kernels.

All flat layouts are co-lexicographic (column-major, first index fastest);
matricizations put the selected mode block on the rows, its complement on the
columns, each block again in co-lexicographic order within the sorted subset.
"""

from __future__ import annotations

import json
import struct
from contextlib import contextmanager

import numpy as np

# Singular values below SVD_RTOL * sigma_max count as numerically zero inside
# the dense kernels (null spaces, numerical ranks).  This is machine-precision
# territory and deliberately far below the evaluation epsilon 1e-6 used by the
# experiment module.
SVD_RTOL = 1e-12

DEFAULT_AMBIENT_CAP = 10**8


class InvalidSubsetError(ValueError):
    """A mode subset is empty, full, or outside the tensor's modes."""


class NumericalFailure(RuntimeError):
    """A dense kernel (SVD etc.) failed to converge."""


class AmbientAllocationError(MemoryError):
    """A dense tensor larger than the active allocation audit limit was built."""


class _AllocationAudit:
    def __init__(self, limit):
        self.limit = limit
        self.violations = []


_audits: list[_AllocationAudit] = []


@contextmanager
def allocation_audit(limit, strict=True):
    """Track construction of dense tensors with more than ``limit`` entries.

    With ``strict`` the offending construction raises immediately; otherwise
    violations are only recorded on the yielded audit object.
    """
    audit = _AllocationAudit(limit if strict else None)
    audit.strict = strict
    audit.limit = limit
    _audits.append(audit)
    try:
        yield audit
    finally:
        _audits.remove(audit)


def _notify_allocation(size):
    for audit in _audits:
        if size > audit.limit:
            audit.violations.append(size)
            if audit.strict:
                raise AmbientAllocationError(
                    f"dense tensor with {size} entries exceeds audit limit {audit.limit}"
                )


class Shape:
    """Mode sizes n_1..n_d of a d-dimensional tensor, d >= 2."""

    def __init__(self, dims):
        dims = tuple(int(n) for n in dims)
        if len(dims) < 2:
            raise ValueError("need at least two modes")
        if any(n < 1 for n in dims):
            raise ValueError("mode sizes must be positive")
        self.dims = dims

    @property
    def d(self):
        return len(self.dims)

    def size(self, subset=None):
        """Product of mode sizes over ``subset`` (1-based modes), or all modes."""
        if subset is None:
            return int(np.prod([int(n) for n in self.dims], dtype=object))
        return int(np.prod([int(self.dims[mu - 1]) for mu in subset], dtype=object))

    def __eq__(self, other):
        return isinstance(other, Shape) and self.dims == other.dims

    def __hash__(self):
        return hash(self.dims)

    def __repr__(self):
        return f"Shape{self.dims}"


class ModeSubset:
    """A nonempty proper subset J of the modes [d], kept sorted."""

    def __init__(self, members, d):
        members = tuple(sorted(set(int(m) for m in members)))
        if not members:
            raise InvalidSubsetError("subset must be nonempty")
        if any(m < 1 or m > d for m in members):
            raise InvalidSubsetError(f"subset {members} not within [1, {d}]")
        if len(members) == d:
            raise InvalidSubsetError("subset must be proper")
        self.members = members
        self.d = d

    def complement(self):
        comp = tuple(m for m in range(1, self.d + 1) if m not in set(self.members))
        return ModeSubset(comp, self.d)

    def __contains__(self, mu):
        return mu in self.members

    def __iter__(self):
        return iter(self.members)

    def __len__(self):
        return len(self.members)

    def __eq__(self, other):
        if isinstance(other, ModeSubset):
            return self.members == other.members and self.d == other.d
        return NotImplemented

    def __hash__(self):
        return hash((self.members, self.d))

    def __repr__(self):
        return f"ModeSubset{self.members}"


def as_subset(subset, d):
    if isinstance(subset, ModeSubset):
        if subset.d != d:
            raise InvalidSubsetError("subset declared for a different dimension")
        return subset
    return ModeSubset(subset, d)


class DenseTensor:
    """Dense real tensor; ``array`` carries the entries, mode mu on axis mu-1."""

    def __init__(self, array, shape=None):
        array = np.asarray(array, dtype=float)
        if shape is not None:
            array = array.reshape(shape.dims, order="F")
        self.array = array
        self.shape = Shape(array.shape)
        _notify_allocation(array.size)

    @classmethod
    def from_flat(cls, data, shape):
        shape = shape if isinstance(shape, Shape) else Shape(shape)
        data = np.asarray(data, dtype=float)
        if data.size != shape.size():
            raise ValueError("flat data length does not match shape")
        return cls(data.reshape(shape.dims, order="F"))

    @classmethod
    def zeros(cls, shape):
        shape = shape if isinstance(shape, Shape) else Shape(shape)
        return cls(np.zeros(shape.dims))

    @property
    def data(self):
        """Flat entries in co-lexicographic order."""
        return self.array.reshape(-1, order="F")

    def norm(self):
        return float(np.linalg.norm(self.array))

    def copy(self):
        return DenseTensor(self.array.copy())

    def __eq__(self, other):
        return isinstance(other, DenseTensor) and np.array_equal(self.array, other.array)

    def __repr__(self):
        return f"DenseTensor(shape={self.shape.dims})"


def matricize(x: DenseTensor, subset) -> np.ndarray:
    """Reshape ``x`` into the n_J x n_{J^c} matrix for the mode subset J."""
    d = x.shape.d
    j = as_subset(subset, d)
    jc = j.complement()
    perm = [mu - 1 for mu in j.members] + [mu - 1 for mu in jc.members]
    rows = x.shape.size(j.members)
    cols = x.shape.size(jc.members)
    return np.transpose(x.array, perm).reshape(rows, cols, order="F")


def dematricize(matrix, subset, shape) -> DenseTensor:
    """Inverse of :func:`matricize` for the given subset and tensor shape."""
    shape = shape if isinstance(shape, Shape) else Shape(shape)
    j = as_subset(subset, shape.d)
    jc = j.complement()
    perm = [mu - 1 for mu in j.members] + [mu - 1 for mu in jc.members]
    dims_perm = [shape.dims[p] for p in perm]
    arr = np.asarray(matrix, dtype=float).reshape(dims_perm, order="F")
    inv = np.argsort(perm)
    return DenseTensor(np.transpose(arr, inv))


def singular_values(x: DenseTensor, subset, pad_to_rows=False) -> np.ndarray:
    """Singular values of the J-matricization, optionally zero-padded to n_J."""
    j = as_subset(subset, x.shape.d)
    mat = matricize(x, j)
    try:
        sigma = np.linalg.svd(mat, compute_uv=False)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - numpy rarely fails
        raise NumericalFailure(f"SVD failed for subset {j.members}") from exc
    if pad_to_rows and mat.shape[0] > sigma.size:
        sigma = np.concatenate([sigma, np.zeros(mat.shape[0] - sigma.size)])
    return sigma


def pinv_solve(a, b) -> np.ndarray:
    """Minimum-norm least-squares solution of ``a x = b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape[0] != b.shape[0]:
        raise ValueError("non-conforming dimensions")
    x, *_ = np.linalg.lstsq(a, b, rcond=None)
    return x


def null_space(a) -> np.ndarray:
    """Orthonormal basis of kernel(a); columns satisfy ||a k|| <= 1e-10 ||a||."""
    a = np.asarray(a, dtype=float)
    u, s, vt = np.linalg.svd(a, full_matrices=True)
    if s.size:
        rank = int(np.sum(s > SVD_RTOL * s[0]))
    else:
        rank = 0
    return vt[rank:].T


def spd_solve(a, b):
    """Solve ``a x = b`` for symmetric positive definite ``a`` via Cholesky."""
    from scipy.linalg import cho_factor, cho_solve

    c = cho_factor(a, lower=True, check_finite=False)
    return cho_solve(c, b, check_finite=False)


def qr_nonneg(a):
    """Thin QR with the sign convention diag(R) >= 0."""
    q, r = np.linalg.qr(a)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs, r * signs[:, None]


# --- file formats -----------------------------------------------------------

_MAGIC = b"SRT1"


def write_srt1(path, x: DenseTensor):
    """Write a tensor in the SRT1 binary format (little-endian, colex data)."""
    dims = x.shape.dims
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(dims)))
        for n in dims:
            fh.write(struct.pack("<Q", n))
        fh.write(x.data.astype("<f8").tobytes())


def read_srt1(path) -> DenseTensor:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError("not an SRT1 file")
        (d,) = struct.unpack("<Q", fh.read(8))
        dims = [struct.unpack("<Q", fh.read(8))[0] for _ in range(d)]
        count = int(np.prod(dims, dtype=object))
        data = np.frombuffer(fh.read(count * 8), dtype="<f8")
    return DenseTensor.from_flat(np.array(data), Shape(dims))


def write_tensor_json(path, x: DenseTensor):
    with open(path, "w") as fh:
        json.dump({"shape": list(x.shape.dims), "data": x.data.tolist()}, fh)


def read_tensor_json(path) -> DenseTensor:
    with open(path) as fh:
        doc = json.load(fh)
    return DenseTensor.from_flat(np.array(doc["data"], dtype=float), Shape(doc["shape"]))
