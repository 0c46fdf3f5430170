"""Cutting-planes and cutting-plane sets over the surrogate variable ``z = (pi, u)``.

A :class:`CutSet` is the only thing processors ever exchange.  It is an
immutable snapshot backed by a dense ``(m, dim)`` coefficient matrix so the
master problem can consume it without conversion.
"""

from __future__ import annotations

import enum
import io
import struct
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

DEDUP_DECIMALS = 12
WIRE_MAGIC = b"PCUT"
WIRE_VERSION = 1


class GeometryError(ValueError):
    pass


class CutKind(enum.IntEnum):
    OBJECTIVE_BOUND = 0
    NONNEGATIVITY = 1
    ORACLE = 2
    EMPTY = 3


# kinds that prune_active never drops (see CutSet.prune_active)
SAFETY_KINDS = (CutKind.OBJECTIVE_BOUND, CutKind.NONNEGATIVITY)


@dataclass(frozen=True)
class CutPlane:
    """Half-space ``a.z <= b`` with a provenance tag ``origin = (processor, round)``."""

    a: np.ndarray
    b: float
    origin: tuple = (-1, -1)
    kind: CutKind = CutKind.ORACLE

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", float(self.b))
        if not (np.all(np.isfinite(a)) and np.isfinite(self.b)):
            raise GeometryError("cut coefficients must be finite")
        empty = not np.linalg.norm(a) > 0
        if self.kind == CutKind.EMPTY:
            if not empty or self.b != 0.0:
                raise GeometryError("the empty cut is 0.z <= 0")
        elif empty:
            raise GeometryError("non-empty cut needs a != 0")

    @classmethod
    def empty(cls, dim: int, origin=(-1, -1)) -> "CutPlane":
        return cls(np.zeros(dim), 0.0, origin, CutKind.EMPTY)

    @property
    def is_empty(self) -> bool:
        return self.kind == CutKind.EMPTY

    def violation(self, z) -> float:
        return float(self.a @ np.asarray(z, dtype=float) - self.b)


class CutSet:
    """Deduplicated collection of non-empty cuts; ``n_pi`` leading coordinates are prices."""

    __slots__ = ("A", "b", "kinds", "origins", "n_pi")

    def __init__(self, A, b, kinds, origins, n_pi: int):
        A = np.asarray(A, dtype=float)
        b = np.asarray(b, dtype=float)
        if A.ndim != 2 or b.shape != (A.shape[0],):
            raise GeometryError("inconsistent cut arrays")
        if len(kinds) != len(b) or len(origins) != len(b):
            raise GeometryError("metadata length mismatch")
        self.A = A
        self.b = b
        self.kinds = np.asarray(kinds, dtype=np.int8)
        self.origins = tuple(tuple(o) for o in origins)
        self.n_pi = int(n_pi)
        A.flags.writeable = False
        b.flags.writeable = False
        self.kinds.flags.writeable = False

    # -- construction -------------------------------------------------
    @classmethod
    def new(cls, dim: int, n_pi: int) -> "CutSet":
        return cls(np.zeros((0, dim)), np.zeros(0), [], [], n_pi)

    @classmethod
    def from_cuts(cls, cuts: Iterable[CutPlane], dim: int, n_pi: int) -> "CutSet":
        cuts = [c for c in cuts if not c.is_empty]
        for c in cuts:
            if c.a.shape != (dim,):
                raise GeometryError(f"cut dimension {c.a.shape} != {dim}")
        if not cuts:
            return cls.new(dim, n_pi)
        out = cls(np.array([c.a for c in cuts]), np.array([c.b for c in cuts]),
                  [int(c.kind) for c in cuts], [c.origin for c in cuts], n_pi)
        return out._dedup()

    # -- basic protocol -------------------------------------------------
    @property
    def dim(self) -> int:
        return self.A.shape[1]

    @property
    def n_u(self) -> int:
        return self.dim - self.n_pi

    def __len__(self) -> int:
        return len(self.b)

    def __iter__(self) -> Iterator[CutPlane]:
        for k in range(len(self)):
            yield self[k]

    def __getitem__(self, k: int) -> CutPlane:
        return CutPlane(self.A[k].copy(), self.b[k], self.origins[k], CutKind(int(self.kinds[k])))

    def __repr__(self) -> str:
        return f"CutSet(m={len(self)}, dim={self.dim}, n_pi={self.n_pi})"

    def subset(self, mask) -> "CutSet":
        idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask, dtype=int)
        return CutSet(self.A[idx], self.b[idx], self.kinds[idx],
                      [self.origins[k] for k in idx], self.n_pi)

    def _dedup(self) -> "CutSet":
        if len(self) <= 1:
            return self
        norms = np.linalg.norm(self.A, axis=1)
        key = np.round(np.column_stack([self.A / norms[:, None], self.b / norms]), DEDUP_DECIMALS)
        _, first = np.unique(key, axis=0, return_index=True)
        if len(first) == len(self):
            return self
        return self.subset(np.sort(first))

    def _check_dim(self, other: "CutSet"):
        if other.dim != self.dim or other.n_pi != self.n_pi:
            raise GeometryError(f"dimension mismatch: {self} vs {other}")

    # -- set algebra ----------------------------------------------------
    def union(self, *others: "CutSet") -> "CutSet":
        """Union of cut sets, i.e. intersection of the induced polyhedra."""
        parts = [self]
        for o in others:
            self._check_dim(o)
            if len(o):
                parts.append(o)
        if len(parts) == 1:
            return self
        out = CutSet(np.vstack([p.A for p in parts]), np.concatenate([p.b for p in parts]),
                     np.concatenate([p.kinds for p in parts]),
                     [o for p in parts for o in p.origins], self.n_pi)
        return out._dedup()

    def add(self, cut: CutPlane) -> "CutSet":
        if cut.is_empty:
            return self
        if cut.a.shape != (self.dim,):
            raise GeometryError("cut dimension mismatch")
        return self.union(CutSet(cut.a[None, :], [cut.b], [int(cut.kind)], [cut.origin], self.n_pi))

    def slack(self, z) -> np.ndarray:
        """``b - A z`` for every cut (negative means violated)."""
        return self.b - self.A @ np.asarray(z, dtype=float)

    def contains(self, z, tol: float = 0.0) -> bool:
        z = np.asarray(z, dtype=float)
        if z.shape != (self.dim,):
            raise GeometryError(f"point dimension {z.shape} != {self.dim}")
        return bool(np.all(self.slack(z) >= -tol))

    def prune_active(self, z_opt, eps_act: float = 1e-7, cap: int | None = None,
                     multipliers=None) -> "CutSet":
        """Keep the cuts active at ``z_opt`` plus the safety cuts.

        Active means ``|a.z - b| <= eps_act * (1 + |b|)``.  Nonnegativity cuts
        are always kept; of the objective-bound cuts only the tightest one is
        kept, which preserves boundedness of the master problem.  Cuts with a
        positive master multiplier are kept as well: they alone pin the
        optimum, so pruning stays exact even when ``z_opt`` carries solver
        noise larger than ``eps_act``.
        """
        resid = np.abs(self.A @ np.asarray(z_opt, dtype=float) - self.b)
        keep = resid <= eps_act * (1.0 + np.abs(self.b))
        if multipliers is not None:
            keep |= np.asarray(multipliers) > 0
        keep |= self.kinds == CutKind.NONNEGATIVITY
        bound = np.flatnonzero(self.kinds == CutKind.OBJECTIVE_BOUND)
        if len(bound):
            norms = np.linalg.norm(self.A[bound], axis=1)
            keep[bound[np.argmin(self.b[bound] / norms)]] = True
        out = self.subset(keep)
        if cap is not None and len(out) > cap:
            out = out._evict(z_opt, cap, None if multipliers is None else np.asarray(multipliers)[keep])
        return out

    def _evict(self, z, cap: int, multipliers=None) -> "CutSet":
        # drop the slackest oracle cuts first, oldest first among equals
        slack = self.slack(z) / np.linalg.norm(self.A, axis=1)
        protected = np.isin(self.kinds, [int(k) for k in SAFETY_KINDS])
        if multipliers is not None:
            protected |= multipliers > 0
        rounds = np.array([o[1] for o in self.origins])
        order = np.lexsort((rounds, -slack))
        drop = [k for k in order if not protected[k]][:len(self) - cap]
        keep = np.ones(len(self), dtype=bool)
        keep[drop] = False
        return self.subset(keep)

    # -- wire format ----------------------------------------------------
    def to_bytes(self) -> bytes:
        """Little-endian, versioned, length-prefixed encoding."""
        buf = io.BytesIO()
        buf.write(WIRE_MAGIC)
        buf.write(struct.pack("<HIII", WIRE_VERSION, self.dim, self.n_pi, len(self)))
        for k in range(len(self)):
            pid, rnd = self.origins[k]
            buf.write(struct.pack("<iiBd", pid, rnd, int(self.kinds[k]), self.b[k]))
            buf.write(self.A[k].astype("<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "CutSet":
        if data[:4] != WIRE_MAGIC:
            raise GeometryError("bad magic")
        version, dim, n_pi, m = struct.unpack_from("<HIII", data, 4)
        if version != WIRE_VERSION:
            raise GeometryError(f"unsupported wire version {version}")
        off = 4 + struct.calcsize("<HIII")
        rec = struct.calcsize("<iiBd")
        A = np.zeros((m, dim))
        b = np.zeros(m)
        kinds, origins = [], []
        for k in range(m):
            pid, rnd, kind, bk = struct.unpack_from("<iiBd", data, off)
            off += rec
            A[k] = np.frombuffer(data, dtype="<f8", count=dim, offset=off)
            off += 8 * dim
            b[k] = bk
            kinds.append(kind)
            origins.append((pid, rnd))
        if off != len(data):
            raise GeometryError("trailing bytes in cut-set payload")
        return cls(A, b, kinds, origins, n_pi)

    def same_as(self, other: "CutSet") -> bool:
        return (self.dim == other.dim and self.n_pi == other.n_pi
                and np.array_equal(self.A, other.A) and np.array_equal(self.b, other.b)
                and np.array_equal(self.kinds, other.kinds) and self.origins == other.origins)


def union(s1: CutSet, s2: CutSet) -> CutSet:
    return s1.union(s2)


def membership(s: CutSet, z, tol: float = 0.0) -> bool:
    return s.contains(z, tol)


def prune_active(s: CutSet, z_opt, eps_act: float = 1e-7) -> CutSet:
    return s.prune_active(z_opt, eps_act)


def objective_bound_cut(n_pi: int, n_u: int, M: float, origin=(-1, 0)) -> CutPlane:
    a = np.concatenate([np.zeros(n_pi), np.ones(n_u)])
    return CutPlane(a, M, origin, CutKind.OBJECTIVE_BOUND)


def nonnegativity_cuts(n_pi: int, n_u: int, origin=(-1, 0)) -> list:
    cuts = []
    for t in range(n_pi):
        a = np.zeros(n_pi + n_u)
        a[t] = -1.0
        cuts.append(CutPlane(a, 0.0, origin, CutKind.NONNEGATIVITY))
    return cuts
