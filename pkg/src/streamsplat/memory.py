"""Token-granular dual-key memory bank.

Each token stores a latent key, a unit direction key (shared by all tokens
written from one view), a value vector and usage bookkeeping. Reads issue two
softmax attentions over the whole bank: one favoring tokens whose direction
agrees with the query direction, one favoring opposing directions. When a
write would overflow capacity, a fixed fraction of tokens is pruned from the
most redundantly-covered half of the bank, lowest usage first.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

DENSE_FRACTION = 0.5
USAGE_PERCENTILE = 40.0
DROP_FRACTION = 0.2
ANTIPODAL_EPS = 1e-6
UNIT_TOL = 1e-3


class EmptyBankError(RuntimeError):
    """A read or score was requested from a bank with no tokens."""


class UndefinedCoverageError(ValueError):
    """Coverage needs at least two tokens."""


def direction_key_from_angles(theta, phi):
    """Unit vector for azimuth ``theta`` and polar angle ``phi`` (radians)."""
    if not (math.isfinite(theta) and math.isfinite(phi)):
        raise ValueError("angles must be finite")
    s = math.sin(phi)
    return np.array([s * math.cos(theta), s * math.sin(theta), math.cos(phi)])


def _check_unit(v, name):
    v = np.asarray(v, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(v) - 1.0) > UNIT_TOL:
        raise ValueError(f"{name} must be a unit vector")
    return v


def direction_query(k0, kt):
    """Normalized mean of the reference and current direction keys.

    Antipodal inputs have no mean direction; ``k0`` is returned in that case.
    """
    k0 = _check_unit(k0, "k0")
    kt = _check_unit(kt, "kt")
    s = k0 + kt
    n = np.linalg.norm(s)
    if n < ANTIPODAL_EPS:
        return k0.copy()
    return s / n


def temperature(sigma):
    """Softmax temperature 2.5 - sigma, sigma clamped to [0, 1]."""
    if not 0.0 <= sigma <= 1.0:
        log.warning("confidence %r outside [0, 1]; clamping", sigma)
        sigma = min(max(float(sigma), 0.0), 1.0)
    return 2.5 - sigma


def softmax_rows(scores):
    z = scores - scores.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


@dataclass
class ReadoutResult:
    aligned: np.ndarray
    complementary: np.ndarray
    attention_aligned: np.ndarray
    attention_comp: np.ndarray

    def entropy(self):
        """Mean row entropy (nats) of both attention maps."""
        out = []
        for a in (self.attention_aligned, self.attention_comp):
            with np.errstate(divide="ignore", invalid="ignore"):
                h = -np.where(a > 0, a * np.log(a), 0.0).sum(axis=1)
            out.append(h.mean())
        return float(np.mean(out))


@dataclass
class MemoryToken:
    """Read-only view of one bank row."""

    token_id: int
    latent_key: np.ndarray
    direction_key: np.ndarray
    value: np.ndarray
    usage_sum: float
    read_count: int
    birth_t: int


class MemoryBank:
    """Bounded store of (latent key, direction key, value) tokens.

    Single writer; reads also mutate usage counters, so callers sharing a bank
    across threads must serialize every public call.
    """

    _MAGIC = b"DKMB"
    _VERSION = 1

    def __init__(self, feature_dim=64, tokens_per_view=64, capacity_tokens=None, use_direction=True,
                 dense_fraction=DENSE_FRACTION, usage_percentile=USAGE_PERCENTILE, drop_fraction=DROP_FRACTION):
        if capacity_tokens is None:
            capacity_tokens = 20 * tokens_per_view
        if feature_dim < 1 or tokens_per_view < 1 or capacity_tokens < tokens_per_view:
            raise ValueError("invalid bank dimensions")
        self.feature_dim = int(feature_dim)
        self.tokens_per_view = int(tokens_per_view)
        self.capacity_tokens = int(capacity_tokens)
        self.use_direction = bool(use_direction)
        if not (0 < dense_fraction <= 1 and 0 < usage_percentile <= 100 and 0 < drop_fraction <= dense_fraction):
            raise ValueError("invalid pruning fractions")
        self.dense_fraction = float(dense_fraction)
        self.usage_percentile = float(usage_percentile)
        self.drop_fraction = float(drop_fraction)
        self.clear()

    def clear(self):
        C = self.feature_dim
        self.latent_keys = np.zeros((0, C))
        self.direction_keys = np.zeros((0, 3))
        self.values = np.zeros((0, C))
        self.usage_sum = np.zeros(0)
        self.read_count = np.zeros(0, dtype=np.int64)
        self.birth_t = np.zeros(0, dtype=np.int64)
        self.token_ids = np.zeros(0, dtype=np.int64)
        self._next_id = 0

    def __len__(self):
        return self.latent_keys.shape[0]

    def copy(self):
        other = MemoryBank.__new__(MemoryBank)
        other.__dict__.update({k: (v.copy() if isinstance(v, np.ndarray) else v)
                               for k, v in self.__dict__.items()})
        return other

    def token(self, i) -> MemoryToken:
        return MemoryToken(int(self.token_ids[i]), self.latent_keys[i].copy(), self.direction_keys[i].copy(),
                           self.values[i].copy(), float(self.usage_sum[i]), int(self.read_count[i]),
                           int(self.birth_t[i]))

    # -- scoring -----------------------------------------------------------

    def _directional(self, qD, sign):
        if not self.use_direction:
            return np.ones(len(self))
        return sign * (self.direction_keys @ np.asarray(qD, dtype=np.float64))

    def _scores(self, qL, qD, tau, sign):
        if len(self) == 0:
            raise EmptyBankError("memory bank is empty")
        if not tau > 0:
            raise ValueError("temperature must be positive")
        qL = np.atleast_2d(np.asarray(qL, dtype=np.float64))
        latent = qL @ self.latent_keys.T
        return latent * (self._directional(qD, sign) / tau)[None, :]

    def aligned_scores(self, qL, qD, tau):
        """(latent match) x (direction agreement) / tau, shape (P, n)."""
        return self._scores(qL, qD, tau, 1.0)

    def complementary_scores(self, qL, qD, tau):
        """As :meth:`aligned_scores` with the direction agreement negated."""
        return self._scores(qL, qD, tau, -1.0)

    # -- read / write ------------------------------------------------------

    def read(self, qL, k0D, ktD, sigma) -> ReadoutResult:
        """Both attention reads for one timestep; updates usage counters."""
        if len(self) == 0:
            raise EmptyBankError("memory bank is empty")
        qD = direction_query(k0D, ktD)
        tau = temperature(sigma)
        a_al = softmax_rows(self.aligned_scores(qL, qD, tau))
        a_cp = softmax_rows(self.complementary_scores(qL, qD, tau))
        P = a_al.shape[0]
        self.usage_sum += (a_al.sum(axis=0) + a_cp.sum(axis=0)) / P
        self.read_count += 1
        return ReadoutResult(a_al @ self.values, a_cp @ self.values, a_al, a_cp)

    def write(self, latent_keys, direction_key, values, t):
        """Append one view's tokens, pruning first if capacity would be exceeded.

        Returns the ids removed by any pruning that happened.
        """
        latent_keys = np.asarray(latent_keys, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        P, C = self.tokens_per_view, self.feature_dim
        if latent_keys.shape != (P, C) or values.shape != (P, C):
            raise ValueError(f"expected ({P}, {C}) keys and values, got {latent_keys.shape} and {values.shape}")
        kD = _check_unit(direction_key, "direction_key")
        kD = kD / np.linalg.norm(kD)
        removed = []
        while len(self) + P > self.capacity_tokens:
            removed.extend(self.sparsify())
        self.latent_keys = np.vstack([self.latent_keys, latent_keys])
        self.direction_keys = np.vstack([self.direction_keys, np.broadcast_to(kD, (P, 3))])
        self.values = np.vstack([self.values, values])
        self.usage_sum = np.concatenate([self.usage_sum, np.zeros(P)])
        self.read_count = np.concatenate([self.read_count, np.zeros(P, dtype=np.int64)])
        self.birth_t = np.concatenate([self.birth_t, np.full(P, int(t), dtype=np.int64)])
        self.token_ids = np.concatenate([self.token_ids, np.arange(self._next_id, self._next_id + P)])
        self._next_id += P
        return removed

    # -- sparsification ----------------------------------------------------

    def usage(self, i=None):
        """Mean accumulated attention mass per read; 0 for never-read tokens."""
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.where(self.read_count > 0, self.usage_sum / np.maximum(self.read_count, 1), 0.0)
        return u if i is None else float(u[i])

    def coverage(self, i=None):
        """Mean direction-key dot product of each token with all others."""
        n = len(self)
        if n < 2:
            raise UndefinedCoverageError("coverage needs at least two tokens")
        K = self.direction_keys
        total = K @ K.sum(axis=0)
        c = (total - np.einsum("ij,ij->i", K, K)) / (n - 1)
        return c if i is None else float(c[i])

    def prune_plan(self):
        """Token row indices :meth:`sparsify` would remove, plus the dense subset."""
        n = len(self)
        n_drop = math.ceil(self.drop_fraction * n)
        n_dense = math.ceil(self.dense_fraction * n)
        cov = self.coverage()
        u = self.usage()
        # coverage descending; ties go to low usage, then older, then lower id
        order = np.lexsort((self.token_ids, self.birth_t, u, -cov))
        dense = order[:n_dense]
        du = np.sort(u[dense])
        rank = max(1, math.ceil(self.usage_percentile / 100.0 * n_dense))
        u_q = du[rank - 1]
        by_usage = dense[np.lexsort((self.token_ids[dense], self.birth_t[dense], u[dense]))]
        candidates = by_usage[u[by_usage] <= u_q]
        if len(candidates) >= n_drop:
            removal = candidates[:n_drop]
        else:
            removal = by_usage[:n_drop]
        return removal, dense

    def sparsify(self):
        """Drop ceil(20%) of tokens from the dense-coverage half; returns removed ids."""
        removal, _ = self.prune_plan()
        ids = self.token_ids[removal].tolist()
        keep = np.ones(len(self), dtype=bool)
        keep[removal] = False
        for name in ("latent_keys", "direction_keys", "values", "usage_sum", "read_count", "birth_t", "token_ids"):
            setattr(self, name, getattr(self, name)[keep])
        log.debug("sparsified bank: removed %d tokens, %d remain", len(ids), len(self))
        return ids

    # -- persistence -------------------------------------------------------

    def snapshot(self, path):
        """Binary dump: header, then float32 keys/values/usage and int64 counters (little-endian)."""
        n = len(self)
        header = struct.pack("<4sIIIIIqB", self._MAGIC, self._VERSION, self.feature_dim, self.tokens_per_view,
                             self.capacity_tokens, n, self._next_id, int(self.use_direction))
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(self.latent_keys.astype("<f4").tobytes())
            fh.write(self.direction_keys.astype("<f4").tobytes())
            fh.write(self.values.astype("<f4").tobytes())
            fh.write(self.usage_sum.astype("<f4").tobytes())
            for arr in (self.read_count, self.birth_t, self.token_ids):
                fh.write(arr.astype("<i8").tobytes())

    @classmethod
    def restore(cls, path):
        buf = open(path, "rb").read()
        hsize = struct.calcsize("<4sIIIIIqB")
        if len(buf) < hsize:
            raise ValueError("truncated bank snapshot header")
        magic, version, C, P, cap, n, next_id, use_dir = struct.unpack_from("<4sIIIIIqB", buf)
        if magic != cls._MAGIC or version != cls._VERSION:
            raise ValueError("not a memory bank snapshot")
        expected = hsize + n * (4 * (2 * C + 3 + 1) + 8 * 3)
        if len(buf) != expected:
            raise ValueError(f"snapshot size mismatch: expected {expected} bytes, got {len(buf)}")
        bank = cls(C, P, cap, bool(use_dir))
        off = hsize

        def take(count, dtype, shape):
            nonlocal off
            arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
            off += arr.nbytes
            return arr.reshape(shape).astype(np.float64 if dtype == "<f4" else np.int64)

        bank.latent_keys = take(n * C, "<f4", (n, C))
        kd = take(n * 3, "<f4", (n, 3))
        bank.direction_keys = kd / np.linalg.norm(kd, axis=1, keepdims=True) if n else kd
        bank.values = take(n * C, "<f4", (n, C))
        bank.usage_sum = take(n, "<f4", (n,))
        bank.read_count = take(n, "<i8", (n,))
        bank.birth_t = take(n, "<i8", (n,))
        bank.token_ids = take(n, "<i8", (n,))
        bank._next_id = next_id
        return bank
