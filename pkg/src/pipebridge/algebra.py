"""Dense-vector / sparse-matrix mass algebra and the unnormalized KL divergence.

Marginals, observations, scalings, and messages are dense float64 arrays.
Transition matrices and transport plans are scipy CSR arrays whose stored
entries define their support: a structurally absent entry is an exact zero and
support checks are pattern comparisons.  Constructors eliminate stored zeros so
the two notions agree.  Everything here is pure and safe to share across
threads.
"""

from __future__ import annotations

import numpy as np
from scipy import sparse

from .errors import DivideByZero, LogOfNonPositive, ShapeMismatch, SupportViolation

__all__ = [
    "as_mass_vector",
    "as_support_matrix",
    "kl_divergence",
    "row_sums",
    "elementwise",
    "scale_rows",
    "scale_cols",
]


def as_mass_vector(x, n=None, name="vector"):
    """Validate and return a dense nonnegative float64 vector."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeMismatch(f"{name}: expected a 1-d vector, got shape {v.shape}")
    if n is not None and v.shape[0] != n:
        raise ShapeMismatch(f"{name}: expected length {n}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name}: non-finite entries")
    if v.size and v.min() < 0.0:
        raise ValueError(f"{name}: negative entries")
    return v


def as_support_matrix(m, shape=None, name="matrix"):
    """Return a CSR copy of ``m`` with nonnegative entries and explicit support.

    Stored zeros are eliminated so the stored pattern equals the support.
    """
    a = sparse.csr_array(m, dtype=np.float64).copy()
    a.sum_duplicates()
    a.eliminate_zeros()
    if shape is not None and a.shape != tuple(shape):
        raise ShapeMismatch(f"{name}: expected shape {tuple(shape)}, got {a.shape}")
    if a.data.size:
        if not np.all(np.isfinite(a.data)):
            raise ValueError(f"{name}: non-finite entries")
        if a.data.min() < 0.0:
            raise ValueError(f"{name}: negative entries")
    return a


def _entry_keys(coo):
    return coo.row.astype(np.int64) * coo.shape[1] + coo.col.astype(np.int64)


def _aligned_values(p, q):
    """Values of ``q`` on the stored pattern of ``p`` (sparse, same shape).

    Returns ``(values, missing)`` where ``missing`` marks stored entries of
    ``p`` that are absent from ``q``.
    """
    pc = p.tocoo()
    qc = q.tocoo()
    pk = _entry_keys(pc)
    qk = _entry_keys(qc)
    order = np.argsort(qk, kind="stable")
    qk = qk[order]
    qv = qc.data[order]
    pos = np.searchsorted(qk, pk)
    pos_clipped = np.minimum(pos, max(qk.size - 1, 0))
    if qk.size:
        missing = qk[pos_clipped] != pk
    else:
        missing = np.ones(pk.size, dtype=bool)
    vals = np.where(missing, 0.0, qv[pos_clipped] if qv.size else 0.0)
    return pc.data, vals, missing


def kl_divergence(p, q):
    """Unnormalized KL divergence ``sum(p log(p/q) - p + q)`` with 0 log 0 = 0.

    ``p`` and ``q`` must have identical shape and ``supp(p) <= supp(q)``.
    Accepts dense arrays or sparse matrices; every summand is individually
    nonnegative, so the result is nonnegative up to rounding.

    Raises
    ------
    ShapeMismatch
        If the shapes disagree.
    SupportViolation
        If some entry of ``p`` is positive where ``q`` vanishes.
    """
    if sparse.issparse(p) or sparse.issparse(q):
        ps = p if sparse.issparse(p) else sparse.csr_array(np.asarray(p, dtype=float))
        qs = q if sparse.issparse(q) else sparse.csr_array(np.asarray(q, dtype=float))
        if ps.shape != qs.shape:
            raise ShapeMismatch(f"shapes {ps.shape} and {qs.shape} disagree")
        pdata, qvals, missing = _aligned_values(ps.tocsr(), qs.tocsr())
        if np.any(missing & (pdata > 0.0)):
            raise SupportViolation("p has mass outside the support of q")
        mask = pdata > 0.0
        pm = pdata[mask]
        # log(p) - log(q) avoids underflow of the ratio for subnormal masses
        log_part = float(np.sum(pm * (np.log(pm) - np.log(qvals[mask]))))
        return log_part - float(pdata.sum()) + float(qs.sum())

    pa = np.asarray(p, dtype=np.float64)
    qa = np.asarray(q, dtype=np.float64)
    if pa.shape != qa.shape:
        raise ShapeMismatch(f"shapes {pa.shape} and {qa.shape} disagree")
    mask = pa > 0.0
    if np.any(qa[mask] == 0.0):
        raise SupportViolation("p has mass outside the support of q")
    pm = pa[mask]
    log_part = float(np.sum(pm * (np.log(pm) - np.log(qa[mask]))))
    return log_part - float(pa.sum()) + float(qa.sum())


def row_sums(m):
    """Row sums ``M 1`` as a dense vector."""
    if sparse.issparse(m):
        return np.asarray(m.sum(axis=1)).ravel()
    return np.asarray(m, dtype=np.float64).sum(axis=1)


def elementwise(op, a, b=None):
    """Element-wise ``mul``, ``div``, ``exp``, or ``log``.

    Semantics are restricted to the stored support: for sparse operands the
    result keeps the dividend's (or unary operand's) pattern, and for dense
    division entries where the dividend is zero yield zero regardless of the
    divisor.  ``div`` requires a nonzero divisor on the dividend's support and
    ``log`` requires positive stored entries.
    """
    if op not in ("mul", "div", "exp", "log"):
        raise ValueError(f"unknown element-wise op {op!r}")
    if op in ("mul", "div") and b is None:
        raise ValueError(f"{op} needs two operands")
    if op in ("exp", "log") and b is not None:
        raise ValueError(f"{op} is unary")
    if sparse.issparse(a):
        return _elementwise_sparse(op, a, b)
    return _elementwise_dense(op, np.asarray(a, dtype=np.float64), b)


def _elementwise_dense(op, a, b):
    if op == "exp":
        return np.exp(a)
    if op == "log":
        if np.any(a <= 0.0):
            raise LogOfNonPositive("log of a non-positive entry")
        return np.log(a)
    bb = np.asarray(b, dtype=np.float64)
    if a.shape != bb.shape:
        raise ShapeMismatch(f"shapes {a.shape} and {bb.shape} disagree")
    if op == "mul":
        return a * bb
    mask = a != 0.0
    if np.any(bb[mask] == 0.0):
        raise DivideByZero("zero divisor on the dividend's support")
    out = np.zeros_like(a)
    out[mask] = a[mask] / bb[mask]
    return out


def _elementwise_sparse(op, a, b):
    a = a.tocsr()
    if op == "exp":
        out = a.copy()
        out.data = np.exp(out.data)
        return out
    if op == "log":
        if np.any(a.data <= 0.0):
            raise LogOfNonPositive("log of a non-positive stored entry")
        out = a.copy()
        out.data = np.log(out.data)
        return out
    if not sparse.issparse(b):
        b = sparse.csr_array(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes {a.shape} and {b.shape} disagree")
    if op == "mul":
        out = sparse.csr_array(a.multiply(b))
        out.eliminate_zeros()
        return out
    adata, bvals, missing = _aligned_values(a, b.tocsr())
    if np.any((missing | (bvals == 0.0)) & (adata != 0.0)):
        raise DivideByZero("zero divisor on the dividend's support")
    out = a.copy()
    nz = adata != 0.0
    newdata = np.zeros_like(adata)
    newdata[nz] = adata[nz] / bvals[nz]
    out.data = newdata
    out.eliminate_zeros()
    return out


def scale_rows(m, r):
    """``diag(r) @ M`` for CSR ``M``; zero factors drop entries from the support."""
    out = m.tocsr().copy()
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (m.shape[0],):
        raise ShapeMismatch(f"row scaling of length {r.shape} for {m.shape}")
    out.data = out.data * np.repeat(r, np.diff(out.indptr))
    out.eliminate_zeros()
    return out


def scale_cols(m, c):
    """``M @ diag(c)`` for CSR ``M``; zero factors drop entries from the support."""
    out = m.tocsr().copy()
    c = np.asarray(c, dtype=np.float64)
    if c.shape != (m.shape[1],):
        raise ShapeMismatch(f"column scaling of length {c.shape} for {m.shape}")
    out.data = out.data * c[out.indices]
    out.eliminate_zeros()
    return out
