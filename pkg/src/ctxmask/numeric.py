"""Dense float64 tensors, the linear algebra kernels, and seeded sampling.

Tensors are plain numpy float64 arrays in row-major (C) order; everything
downstream treats them as immutable values once an operation has produced
them. Heavy kernels delegate to numpy's LAPACK/BLAS bindings behind the
narrow interfaces below.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import NumericError, ShapeError

CHOLESKY_JITTER = 1e-8
CHOLESKY_MAX_JITTER = 1e-4


def tensor(data, shape=None) -> np.ndarray:
    """Build a float64, C-ordered array; optionally reshape flat data."""
    arr = np.array(data, dtype=np.float64, order="C")
    if shape is not None:
        arr = arr.reshape(shape)
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product a @ b with an explicit inner-dimension check."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"cannot multiply shapes {tuple(a.shape)} and {tuple(b.shape)}"
        )
    return a @ b


def cholesky(
    a: np.ndarray,
    jitter: float = CHOLESKY_JITTER,
    max_jitter: float = CHOLESKY_MAX_JITTER,
) -> np.ndarray:
    """Lower-triangular L with L @ L.T == a (up to jitter).

    Kernel matrices built from nearby inputs are frequently singular to
    machine precision; when the plain decomposition fails, a diagonal jitter
    starting at ``jitter`` escalates by x10 until ``max_jitter``.
    """
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"cholesky needs a square matrix, got {tuple(a.shape)}")
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    eye = np.eye(a.shape[0])
    level = jitter
    while level <= max_jitter:
        try:
            return np.linalg.cholesky(a + level * eye)
        except np.linalg.LinAlgError:
            level *= 10.0
    raise NumericError(
        f"cholesky failed for {a.shape[0]}x{a.shape[0]} matrix "
        f"even with jitter {max_jitter:g}"
    )


class RngState:
    """Seeded random stream; identical seeds give identical draw sequences.

    A single RngState is never shared between threads. Code that needs
    independent streams derives them with :meth:`split`, which is stable
    under unrelated changes to sibling streams.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._key = _key
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=_key))
        )

    def split(self, index: int) -> "RngState":
        """Child stream ``index``; deterministic in (seed, key path)."""
        return RngState(self.seed, self._key + (int(index),))

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed}, key={self._key})"


def sample_standard_normal(rng: RngState, n: int) -> np.ndarray:
    """n i.i.d. draws from N(0, 1)."""
    if n < 1:
        raise ShapeError(f"need at least one draw, got n={n}")
    return rng._gen.standard_normal(n)


def sample_uniform(rng: RngState, lo: float, hi: float) -> float:
    """One draw from Unif[lo, hi)."""
    if not lo < hi:
        raise ValueError(f"empty uniform range [{lo}, {hi})")
    return float(rng._gen.uniform(lo, hi))


def shuffled_indices(rng: RngState, n: int) -> np.ndarray:
    """Permutation of range(n) from the stream."""
    return rng._gen.permutation(n)


def tensor_to_json(arr: np.ndarray) -> dict:
    """Flat {shape, data} object used inside checkpoint files."""
    return {"shape": list(arr.shape), "data": arr.ravel(order="C").tolist()}


def tensor_from_json(obj: dict) -> np.ndarray:
    shape = obj["shape"]
    data = np.array(obj["data"], dtype=np.float64)
    expected = int(np.prod(shape)) if shape else 1
    if data.size != expected:
        raise ShapeError(
            f"serialized tensor claims shape {shape} but carries {data.size} values"
        )
    return data.reshape(shape)


def dumps_tensor(arr: np.ndarray) -> str:
    return json.dumps(tensor_to_json(arr))


def loads_tensor(text: str) -> np.ndarray:
    return tensor_from_json(json.loads(text))
