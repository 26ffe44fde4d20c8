"""Tensor-train matrix algebra.

A TT-matrix represents an ``M x J`` matrix ``W`` through a chain of d
four-way cores ``G_k`` of shape ``(R_{k-1}, M_k, J_k, R_k)`` where
``M = prod(M_k)``, ``J = prod(J_k)`` and ``R_0 = R_d = 1``.  Entry
``W(m, j)`` equals the chained product of the rank-by-rank slices picked
out by the digits of ``m`` and ``j``.

Index convention (used everywhere, including serialization): indices are
0-based and split row-major, mode 1 most significant.  For row factors
``(M_1, ..., M_d)`` the digit vector of ``m`` satisfies
``m = ((m_1 * M_2 + m_2) * M_3 + ...) + m_d``; columns likewise.

All entries are float64.  Values are immutable after construction and all
operations are pure functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TTShapeError",
    "FactorizedShape",
    "TTMatrix",
    "index_to_multi",
    "multi_to_index",
    "tt_reconstruct",
    "tt_matvec",
    "tt_param_count",
    "tt_truncate",
    "conv_kernel_reshape",
    "conv_kernel_restore",
    "apply_batch",
    "apply_batch_forward",
    "apply_batch_backward",
]


class TTShapeError(ValueError):
    """Raised when shapes, factorizations, or ranks are inconsistent."""


@dataclass(frozen=True)
class FactorizedShape:
    """Row/column factorization of a matrix: M = prod(row_factors), J = prod(col_factors)."""

    row_factors: tuple[int, ...]
    col_factors: tuple[int, ...]

    def __post_init__(self):
        rows = tuple(int(f) for f in self.row_factors)
        cols = tuple(int(f) for f in self.col_factors)
        object.__setattr__(self, "row_factors", rows)
        object.__setattr__(self, "col_factors", cols)
        if len(rows) != len(cols):
            raise TTShapeError(
                f"row/col factor counts differ: {len(rows)} vs {len(cols)}"
            )
        if len(rows) < 2:
            raise TTShapeError("need at least 2 factors per mode")
        if any(f < 1 for f in rows + cols):
            raise TTShapeError("all factors must be >= 1")

    @property
    def order(self) -> int:
        return len(self.row_factors)

    @property
    def nrows(self) -> int:
        return int(np.prod(self.row_factors))

    @property
    def ncols(self) -> int:
        return int(np.prod(self.col_factors))


def _digits(index: int, factors: tuple[int, ...]) -> tuple[int, ...]:
    # mixed-radix decomposition, first factor most significant
    out = []
    for f in reversed(factors):
        out.append(index % f)
        index //= f
    return tuple(reversed(out))


def index_to_multi(m: int, j: int, shape: FactorizedShape) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Split flat 0-based indices ``(m, j)`` into per-mode digit vectors."""
    if not (0 <= m < shape.nrows):
        raise TTShapeError(f"row index {m} out of range [0, {shape.nrows})")
    if not (0 <= j < shape.ncols):
        raise TTShapeError(f"column index {j} out of range [0, {shape.ncols})")
    return _digits(m, shape.row_factors), _digits(j, shape.col_factors)


def multi_to_index(row_digits, col_digits, shape: FactorizedShape) -> tuple[int, int]:
    """Inverse of :func:`index_to_multi`; exact round-trip."""
    if len(row_digits) != shape.order or len(col_digits) != shape.order:
        raise TTShapeError("digit count does not match factor count")
    m = 0
    for digit, f in zip(row_digits, shape.row_factors):
        if not (0 <= digit < f):
            raise TTShapeError(f"row digit {digit} out of range [0, {f})")
        m = m * f + int(digit)
    j = 0
    for digit, f in zip(col_digits, shape.col_factors):
        if not (0 <= digit < f):
            raise TTShapeError(f"column digit {digit} out of range [0, {f})")
        j = j * f + int(digit)
    return m, j


@dataclass
class TTMatrix:
    """A matrix in TT format: a chain of 4-way float64 cores."""

    cores: list[np.ndarray] = field()

    def __post_init__(self):
        if len(self.cores) < 2:
            raise TTShapeError("a TT-matrix needs at least 2 cores")
        cores = []
        for k, core in enumerate(self.cores):
            arr = np.asarray(core, dtype=np.float64)
            if arr.ndim != 4:
                raise TTShapeError(f"core {k} must be 4-way, got {arr.ndim}-way")
            if not np.isfinite(arr).all():
                raise TTShapeError(f"core {k} contains non-finite entries")
            cores.append(arr)
        if cores[0].shape[0] != 1:
            raise TTShapeError(f"first core must have left rank 1, got {cores[0].shape[0]}")
        if cores[-1].shape[3] != 1:
            raise TTShapeError(f"last core must have right rank 1, got {cores[-1].shape[3]}")
        for k in range(len(cores) - 1):
            if cores[k].shape[3] != cores[k + 1].shape[0]:
                raise TTShapeError(
                    f"rank mismatch between cores {k} and {k + 1}: "
                    f"{cores[k].shape[3]} vs {cores[k + 1].shape[0]}"
                )
        self.cores = cores

    @property
    def order(self) -> int:
        return len(self.cores)

    @property
    def shape(self) -> FactorizedShape:
        return FactorizedShape(
            tuple(c.shape[1] for c in self.cores),
            tuple(c.shape[2] for c in self.cores),
        )

    @property
    def ranks(self) -> tuple[int, ...]:
        return (1,) + tuple(c.shape[3] for c in self.cores)

    @property
    def nrows(self) -> int:
        return int(np.prod([c.shape[1] for c in self.cores]))

    @property
    def ncols(self) -> int:
        return int(np.prod([c.shape[2] for c in self.cores]))


def tt_param_count(shape: FactorizedShape, ranks) -> int:
    """Total element count over all cores: sum_k R_{k-1} * M_k * J_k * R_k."""
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != shape.order + 1:
        raise TTShapeError(f"rank vector length {len(ranks)} != order+1 = {shape.order + 1}")
    if ranks[0] != 1 or ranks[-1] != 1:
        raise TTShapeError("boundary ranks must be 1")
    if any(r < 1 for r in ranks):
        raise TTShapeError("ranks must be >= 1")
    return sum(
        ranks[k] * mk * jk * ranks[k + 1]
        for k, (mk, jk) in enumerate(zip(shape.row_factors, shape.col_factors))
    )


def tt_reconstruct(tt: TTMatrix) -> np.ndarray:
    """Materialize the dense ``(M, J)`` matrix represented by ``tt``."""
    t = tt.cores[0][0]  # (M_1, J_1, R_1)
    for core in tt.cores[1:]:
        t = np.tensordot(t, core, axes=([-1], [0]))
    t = t[..., 0]  # drop trailing unit rank -> (M_1, J_1, ..., M_d, J_d)
    d = tt.order
    perm = tuple(range(0, 2 * d, 2)) + tuple(range(1, 2 * d, 2))
    return t.transpose(perm).reshape(tt.nrows, tt.ncols)


def apply_batch(cores: list[np.ndarray], batch: np.ndarray) -> np.ndarray:
    """Map a batch ``(B, M)`` to ``(B, J)`` by y = W^T x without forming W."""
    out, _ = apply_batch_forward(cores, batch)
    return out


def apply_batch_forward(cores, batch):
    """Forward TT contraction for a batch, keeping what backward needs.

    Left-to-right sweep: the carried matrix has rows ``(b, j_<k, m_>k)`` and
    columns ``(R_{k-1}, M_k)``, so each step is one matmul against the core
    reshaped to ``(R_{k-1}*M_k, J_k*R_k)`` followed by a single relayout
    copy that pulls the next row digit into the column block.

    Returns ``(out, cache)`` where ``out`` has shape ``(B, J)``.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2:
        raise TTShapeError(f"batch must be 2-D (B, M), got {batch.ndim}-D")
    b = batch.shape[0]
    row_factors = [c.shape[1] for c in cores]
    m_total = int(np.prod(row_factors))
    if batch.shape[1] != m_total:
        raise TTShapeError(f"input dim {batch.shape[1]} != row count {m_total}")

    jacc = 1
    rest = m_total // row_factors[0]
    # rows (b, jacc=1, rest), cols (r=1, m_1)
    a = np.ascontiguousarray(
        batch.reshape(b, row_factors[0], rest).transpose(0, 2, 1)
    ).reshape(b * rest, row_factors[0])
    steps = []
    out = None
    for k, core in enumerate(cores):
        r, mk, jk, rn = core.shape
        out = a @ core.reshape(r * mk, jk * rn)
        steps.append((a, (jacc, r, mk, jk, rn, rest)))
        if k + 1 < len(cores):
            mn = row_factors[k + 1]
            rest_n = rest // mn
            # out axes: (b, jacc, m_{k+1}, rest_n, j_k, rn)
            #   -> rows (b, jacc, j_k, rest_n), cols (rn, m_{k+1})
            a = np.ascontiguousarray(
                out.reshape(b, jacc, mn, rest_n, jk, rn).transpose(0, 1, 4, 3, 5, 2)
            ).reshape(b * jacc * jk * rest_n, rn * mn)
            jacc *= jk
            rest = rest_n
    # final out: rows (b, jacc), cols (j_d, 1)
    return out.reshape(b, -1), (b, steps)


def apply_batch_backward(cores, cache, grad_out):
    """Reverse-mode pass through :func:`apply_batch_forward`.

    Returns ``(grad_batch, grad_cores)`` for a given ``dL/d out`` of shape
    ``(B, J)``.
    """
    b, steps = cache
    d = len(cores)
    grad_cores: list[np.ndarray] = [np.empty(0)] * d
    jacc, r, mk, jk, rn, rest = steps[-1][1]
    g = np.asarray(grad_out, dtype=np.float64).reshape(b * jacc * rest, jk * rn)
    for k in range(d - 1, -1, -1):
        a, (jacc, r, mk, jk, rn, rest) = steps[k]
        core = cores[k]
        grad_cores[k] = (a.T @ g).reshape(core.shape)
        ga = g @ core.reshape(r * mk, jk * rn).T  # rows (b, jacc, j_k?, rest), cols (r, m_k)
        if k > 0:
            jacc_p, r_p, mk_p, jk_p, rn_p, rest_p = steps[k - 1][1]
            # invert the forward relayout: ga axes (b, jacc_p, jk_p, rest, r, mk)
            #   -> rows (b, jacc_p, rest_p = mk*rest), cols (jk_p, rn_p)
            g = np.ascontiguousarray(
                ga.reshape(b, jacc_p, jk_p, rest, r, mk).transpose(0, 1, 5, 3, 2, 4)
            ).reshape(b * jacc_p * rest_p, jk_p * rn_p)
        else:
            # ga rows (b, rest), cols (1, m_1): undo the input relayout
            grad_batch = np.ascontiguousarray(
                ga.reshape(b, rest, mk).transpose(0, 2, 1)
            ).reshape(b, mk * rest)
    return grad_batch, grad_cores


def tt_matvec(tt: TTMatrix, x: np.ndarray) -> np.ndarray:
    """Compute y with y_j = sum_m W(m, j) x_m by sequential core contraction."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise TTShapeError(f"x must be 1-D, got {x.ndim}-D")
    if x.shape[0] != tt.nrows:
        raise TTShapeError(f"x has length {x.shape[0]}, expected {tt.nrows}")
    return apply_batch(tt.cores, x[None, :])[0]


def tt_truncate(tt: TTMatrix, keep: list) -> TTMatrix:
    """Restrict internal ranks to the given 0-based keep-index sets.

    ``keep[k]`` selects the surviving slices of internal rank k+1; core k
    keeps the matching columns and core k+1 the matching rows.  Boundary
    ranks stay 1.
    """
    d = tt.order
    ranks = tt.ranks
    if len(keep) != d - 1:
        raise TTShapeError(f"expected {d - 1} keep-sets, got {len(keep)}")
    sets = []
    for k, idx in enumerate(keep):
        idx = np.unique(np.asarray(idx, dtype=np.intp))
        if idx.size == 0:
            raise TTShapeError(f"keep-set {k} is empty; rank cannot drop to zero")
        if idx.min() < 0 or idx.max() >= ranks[k + 1]:
            raise TTShapeError(
                f"keep-set {k} out of range [0, {ranks[k + 1]})"
            )
        sets.append(idx)
    boundary = np.array([0], dtype=np.intp)
    left = [boundary] + sets
    right = sets + [boundary]
    cores = [
        core.take(left[k], axis=0).take(right[k], axis=3)
        for k, core in enumerate(tt.cores)
    ]
    return TTMatrix(cores)


def conv_kernel_reshape(kernel: np.ndarray, c_factors, s_factors) -> np.ndarray:
    """Relayout a ``t x t x C x S`` convolution kernel to ``t^2 x c_1 x ... x s_d``.

    Pure reshape under the row-major index convention; entries are preserved
    and :func:`conv_kernel_restore` is a bit-exact inverse.
    """
    kernel = np.asarray(kernel)
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise TTShapeError(f"kernel must be t x t x C x S, got shape {kernel.shape}")
    t, _, c, s = kernel.shape
    c_factors = tuple(int(f) for f in c_factors)
    s_factors = tuple(int(f) for f in s_factors)
    if int(np.prod(c_factors)) != c:
        raise TTShapeError(f"prod{c_factors} != input channels {c}")
    if int(np.prod(s_factors)) != s:
        raise TTShapeError(f"prod{s_factors} != output channels {s}")
    return kernel.reshape((t * t,) + c_factors + s_factors)


def conv_kernel_restore(reshaped: np.ndarray, filter_size: int, c: int, s: int) -> np.ndarray:
    """Inverse of :func:`conv_kernel_reshape`."""
    reshaped = np.asarray(reshaped)
    t = int(filter_size)
    if t * t * c * s != reshaped.size:
        raise TTShapeError(
            f"cannot restore kernel of {t}x{t}x{c}x{s} from {reshaped.size} entries"
        )
    return reshaped.reshape(t, t, c, s)
