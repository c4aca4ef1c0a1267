"""
Numerics Module
FFT, least squares and seeded random streams used by every other service
"""

import hashlib
from dataclasses import dataclass
from typing import Literal, Optional, Tuple

import numpy as np
from scipy.linalg import qr, solve_triangular

from services.errors import DimensionError, RankDeficientError

Direction = Literal["forward", "inverse"]


def is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def dft(v: np.ndarray, direction: Direction = "forward") -> np.ndarray:
    """
    DFT along axis 0 (columns are independent streams).

    forward is unnormalized, inverse carries the 1/N, so
    dft(dft(x), "inverse") == x.
    """
    v = np.asarray(v, dtype=np.complex128)
    n = v.shape[0] if v.ndim else 0
    if not is_power_of_two(n):
        raise DimensionError(f"DFT length must be a power of two, got {n}")

    if direction == "forward":
        return np.fft.fft(v, axis=0)
    if direction == "inverse":
        return np.fft.ifft(v, axis=0)
    raise ValueError(f"Unknown DFT direction: {direction}")


def lstsq(A: np.ndarray, b: np.ndarray, ridge: float = 0.0, rcond: float = 1e-12) -> np.ndarray:
    """
    Minimize ||Ax - b||^2 + ridge * ||x||^2 with a QR factorization of
    the ridge-augmented system [A; sqrt(ridge) I].
    b may hold several right-hand sides as columns.
    """
    A = np.asarray(A, dtype=np.complex128)
    b = np.asarray(b, dtype=np.complex128)
    if A.ndim != 2:
        raise DimensionError(f"A must be a matrix, got shape {A.shape}")
    m, p = A.shape
    if m < p:
        raise DimensionError(f"lstsq needs m >= p, got {m}x{p}")
    if b.shape[0] != m:
        raise DimensionError(f"b has {b.shape[0]} rows, A has {m}")
    if ridge < 0:
        raise ValueError("ridge must be >= 0")

    if ridge > 0:
        A_aug = np.vstack([A, np.sqrt(ridge) * np.eye(p)])
        pad = np.zeros((p,) + b.shape[1:], dtype=np.complex128)
        b_aug = np.concatenate([b, pad], axis=0)
    else:
        A_aug, b_aug = A, b

    Q, R = qr(A_aug, mode="economic")
    diag = np.abs(np.diag(R))
    if ridge == 0 and (diag.size == 0 or diag.min() <= rcond * max(diag.max(), 1e-300)):
        raise RankDeficientError(
            f"Rank-deficient A in lstsq (min |R_ii| = {diag.min():.3e}); use ridge > 0"
        )

    return solve_triangular(R, Q.conj().T @ b_aug, lower=False)


@dataclass(frozen=True)
class RngStream:
    """
    Counter-based (Philox) random stream keyed by (seed, stream_id).
    Every call to generator() restarts the stream from its first draw.
    """

    seed: int
    stream_id: int

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.Philox(seq))


class StreamDraws:
    """Stateful draws from one RngStream"""

    def __init__(self, stream: RngStream):
        self.stream = stream
        self.gen = stream.generator()

    def complex_normal(self, size) -> np.ndarray:
        # unit total variance, 0.5 per component
        re = self.gen.standard_normal(size)
        im = self.gen.standard_normal(size)
        return (re + 1j * im) * np.sqrt(0.5)

    def normal(self, size) -> np.ndarray:
        return self.gen.standard_normal(size)

    def uniform(self, low: float, high: float, size) -> np.ndarray:
        return self.gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size) -> np.ndarray:
        return self.gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)


def rng_stream(seed: int, stream_id: int) -> StreamDraws:
    return StreamDraws(RngStream(int(seed), int(stream_id)))


def stream_id(kind: str, *labels) -> int:
    """Stable 64-bit stream id for a (kind, labels...) key; labels may be ints or strings"""
    key = ":".join([str(kind)] + [str(i) for i in labels])
    return int.from_bytes(hashlib.blake2b(key.encode(), digest_size=8).digest(), "little")


def condition_number(M: np.ndarray) -> float:
    s = np.linalg.svd(M, compute_uv=False)
    if s[-1] == 0:
        return float("inf")
    return float(s[0] / s[-1])


def left_inverse(M: np.ndarray, max_cond: float = 1e12) -> Tuple[np.ndarray, float]:
    """(M^H M)^-1 M^H for a tall full-column-rank M"""
    gram = M.conj().T @ M
    cond = condition_number(gram)
    if not np.isfinite(cond) or cond > max_cond:
        raise RankDeficientError(f"Matrix is rank-deficient (Gram condition number {cond:.3e})")
    return np.linalg.solve(gram, M.conj().T), cond


def db10(x: float, floor_db: Optional[float] = None) -> float:
    if x <= 0:
        return float(floor_db) if floor_db is not None else float("-inf")
    value = 10.0 * np.log10(x)
    if floor_db is not None:
        value = max(value, floor_db)
    return float(value)
