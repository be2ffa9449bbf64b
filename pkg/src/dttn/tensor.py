"""Dense tensor primitives.

A dense tensor is a C-contiguous :class:`numpy.ndarray` of ``float32`` or
``float64``.  ``vec`` is row-major flattening everywhere in the package.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import DimensionError

DTYPES = {"f32": np.float32, "f64": np.float64}


def as_tensor(data, dtype: str | np.dtype | None = None) -> np.ndarray:
    """Return a contiguous real tensor, converting ``data`` if needed."""
    if isinstance(dtype, str) and dtype in DTYPES:
        dtype = DTYPES[dtype]
    arr = np.ascontiguousarray(data, dtype=dtype)
    if dtype is None and arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    if arr.dtype not in (np.float32, np.float64):
        raise DimensionError(f"unsupported dtype {arr.dtype}")
    if any(n < 1 for n in arr.shape):
        raise DimensionError(f"extents must be >= 1, got {arr.shape}")
    return arr


def dtype_tag(dtype) -> str:
    dtype = np.dtype(dtype)
    for tag, dt in DTYPES.items():
        if dtype == dt:
            return tag
    raise DimensionError(f"unsupported dtype {dtype}")


def _check_axes(axes: Sequence[int], rank: int, name: str) -> list[int]:
    out = []
    for ax in axes:
        if not -rank <= ax < rank:
            raise IndexError(f"axis {ax} of {name} out of range for rank {rank}")
        out.append(ax % rank)
    if len(set(out)) != len(out):
        raise IndexError(f"duplicate axes in {name}: {list(axes)}")
    return out


def contract(a: np.ndarray, b: np.ndarray, axes_a: Sequence[int], axes_b: Sequence[int]) -> np.ndarray:
    """Sum over paired modes of ``a`` and ``b``.

    Free modes of ``a`` come first, followed by the free modes of ``b``, both
    in their original order.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if len(axes_a) != len(axes_b):
        raise DimensionError(f"axis lists differ in length: {list(axes_a)} vs {list(axes_b)}")
    axes_a = _check_axes(axes_a, a.ndim, "a")
    axes_b = _check_axes(axes_b, b.ndim, "b")
    for i, j in zip(axes_a, axes_b):
        if a.shape[i] != b.shape[j]:
            raise DimensionError(
                f"extent mismatch: a axis {i} has {a.shape[i]}, b axis {j} has {b.shape[j]}"
            )
    return np.ascontiguousarray(np.tensordot(a, b, axes=(axes_a, axes_b)))


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"hadamard shape mismatch {a.shape} vs {b.shape}")
    return a * b


def outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Tensor product; result has rank ``rank(a) + rank(b)``."""
    a = np.asarray(a)
    b = np.asarray(b)
    return np.multiply.outer(a, b)


def khatri_rao(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Column-wise Kronecker product of ``n1 x o`` and ``n2 x o`` matrices."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"khatri_rao needs matrices, got ranks {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"column counts differ: {a.shape[1]} vs {b.shape[1]}")
    return (a[:, None, :] * b[None, :, :]).reshape(a.shape[0] * b.shape[0], a.shape[1])


def reshape(t: np.ndarray, new_shape: Sequence[int]) -> np.ndarray:
    t = np.asarray(t)
    new_shape = tuple(int(n) for n in new_shape)
    if any(n < 1 for n in new_shape) or int(np.prod(new_shape, dtype=np.int64)) != t.size:
        raise DimensionError(f"cannot reshape {t.shape} into {new_shape}")
    return np.ascontiguousarray(t).reshape(new_shape)


def permute(t: np.ndarray, axis_order: Sequence[int]) -> np.ndarray:
    t = np.asarray(t)
    order = [int(i) for i in axis_order]
    if sorted(order) != list(range(t.ndim)):
        raise DimensionError(f"{order} is not a permutation of 0..{t.ndim - 1}")
    return np.ascontiguousarray(np.transpose(t, order))


def vec(t: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(t).reshape(-1)
