"""Leveled slot-vector machine with an exact simulator and a CKKS backend.

Every operation goes through :class:`SlotVM`, which performs level alignment,
depth checks and trace recording identically for both backends. Backends only
do arithmetic on their own handles.
"""

from __future__ import annotations

import contextlib
import hashlib
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .ckks import CkksClient, CkksEvaluator, CkksParams, MissingGaloisKey, ScaleMismatch, keygen
from .ring import DepthExhausted


class DepthBudgetError(DepthExhausted):
    """A multiply was requested at level 0; carries the pipeline stage name."""

    def __init__(self, stage: str | None, msg: str):
        self.stage = stage
        super().__init__(f"{msg} (stage: {stage})" if stage else msg)


# ---------------------------------------------------------------------------
# trace
# ---------------------------------------------------------------------------


class Event(NamedTuple):
    kind: str
    length: int
    level: int
    arg: object = None

    def line(self) -> str:
        s = f"{self.kind} len={self.length} level={self.level}"
        return s if self.arg is None else f"{s} arg={self.arg}"


@dataclass
class TraceRecord:
    config_digest: str = ""
    events: list = field(default_factory=list)

    def append(self, ev: Event) -> None:
        self.events.append(ev)

    def __len__(self) -> int:
        return len(self.events)

    def rotations(self) -> set:
        return {e.arg for e in self.events if e.kind == "rotate"}

    def count(self, kind: str) -> int:
        return sum(1 for e in self.events if e.kind == kind)

    def dump(self) -> str:
        head = f"# config {self.config_digest}\n"
        return head + "".join(e.line() + "\n" for e in self.events)

    def digest(self) -> str:
        return hashlib.sha256(self.dump().encode()).hexdigest()

    @classmethod
    def parse(cls, text: str) -> "TraceRecord":
        rec = cls()
        for raw in text.splitlines():
            if raw.startswith("# config "):
                rec.config_digest = raw[len("# config ") :].strip()
                continue
            if not raw.strip() or raw.startswith("#"):
                continue
            parts = raw.split()
            kv = dict(p.split("=", 1) for p in parts[1:])
            arg = kv.get("arg")
            if arg is not None and parts[0] == "rotate":
                arg = int(arg)
            rec.append(Event(parts[0], int(kv["len"]), int(kv["level"]), arg))
        return rec


def trace_equals(t1: TraceRecord, t2: TraceRecord):
    """Return ``(equal, first_divergence_index)``; the index is None when equal."""
    for i, (a, b) in enumerate(zip(t1.events, t2.events)):
        if a != b:
            return False, i
    if len(t1.events) != len(t2.events):
        return False, min(len(t1.events), len(t2.events))
    return True, None


def plain_digest(values) -> str:
    v = np.ascontiguousarray(np.asarray(values, dtype=np.float64))
    return hashlib.sha256(v.tobytes()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# exact simulator
# ---------------------------------------------------------------------------


@dataclass
class SimHandle:
    values: np.ndarray
    level: int
    scale: float


class ExactSim:
    """Noise-free backend that mirrors the CKKS level and scale bookkeeping."""

    def __init__(self, params: CkksParams, rotations=None):
        self.params = params
        self.allowed = None if rotations is None else {int(r) % params.slot_count for r in rotations}

    @property
    def slot_count(self) -> int:
        return self.params.slot_count

    @property
    def max_level(self) -> int:
        return self.params.max_level

    def scale_at(self, level: int) -> float:
        return self.params.scale_at(level)

    def _pad(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=np.float64)
        if v.ndim != 1 or v.size > self.slot_count:
            raise ValueError(f"at most {self.slot_count} slot values accepted")
        out = np.zeros(self.slot_count)
        out[: v.size] = v
        return out

    # client side
    def encrypt(self, values, level=None) -> SimHandle:
        lvl = self.max_level if level is None else level
        return SimHandle(self._pad(values), lvl, self.scale_at(lvl))

    def decrypt(self, h: SimHandle, length=None) -> np.ndarray:
        v = h.values.copy()
        return v if length is None else v[:length]

    # evaluator side
    def _check_pair(self, a: SimHandle, b: SimHandle):
        if a.level != b.level:
            raise ValueError(f"level mismatch {a.level} != {b.level}")
        if abs(a.scale / b.scale - 1.0) > 1e-9:
            raise ScaleMismatch(f"scale mismatch {a.scale:.6g} vs {b.scale:.6g}")

    def drop_to(self, h, level):
        return SimHandle(h.values, level, h.scale)

    def add(self, a, b):
        self._check_pair(a, b)
        return SimHandle(a.values + b.values, a.level, a.scale)

    def sub(self, a, b):
        self._check_pair(a, b)
        return SimHandle(a.values - b.values, a.level, a.scale)

    def add_plain(self, a, values):
        return SimHandle(a.values + self._pad(values), a.level, a.scale)

    def mul(self, a, b):
        self._check_pair(a, b)
        return SimHandle(a.values * b.values, a.level, a.scale * b.scale)

    def mul_plain(self, a, values):
        return SimHandle(a.values * self._pad(values), a.level, a.scale * self.scale_at(a.level))

    def mul_int(self, a, k):
        return SimHandle(a.values, a.level, a.scale * k)

    def rescale(self, a):
        if a.level < 1:
            raise DepthExhausted("no level left to rescale")
        q = self.params.chain.data_primes[a.level]
        return SimHandle(a.values, a.level - 1, a.scale / q)

    def rotate(self, a, k):
        k = int(k) % self.slot_count
        if k == 0:
            return a
        if self.allowed is not None and k not in self.allowed:
            raise MissingGaloisKey(f"no Galois key for rotation {k}")
        return SimHandle(np.roll(a.values, -k), a.level, a.scale)


class LevelSim(ExactSim):
    """Bookkeeping-only backend: tracks levels and scales, carries no values.

    Produces the same trace as :class:`ExactSim`; used for depth audits.
    """

    def encrypt(self, values, level=None) -> SimHandle:
        lvl = self.max_level if level is None else level
        return SimHandle(None, lvl, self.scale_at(lvl))

    def decrypt(self, h, length=None):
        raise TypeError("LevelSim carries no values")

    def _pad(self, values):
        return None

    def add(self, a, b):
        self._check_pair(a, b)
        return SimHandle(None, a.level, a.scale)

    sub = add

    def mul(self, a, b):
        self._check_pair(a, b)
        return SimHandle(None, a.level, a.scale * b.scale)

    def add_plain(self, a, values):
        return a

    def mul_plain(self, a, values):
        return SimHandle(None, a.level, a.scale * self.scale_at(a.level))

    def rotate(self, a, k):
        k = int(k) % self.slot_count
        if k and self.allowed is not None and k not in self.allowed:
            raise MissingGaloisKey(f"no Galois key for rotation {k}")
        return a


class CkksBackend:
    """Adapter giving :class:`CkksEvaluator` the backend interface."""

    def __init__(self, evaluator: CkksEvaluator):
        self.ev = evaluator
        self.params = evaluator.params

    slot_count = property(lambda self: self.ev.slot_count)
    max_level = property(lambda self: self.ev.max_level)

    def scale_at(self, level):
        return self.ev.scale_at(level)

    def drop_to(self, h, level):
        return self.ev.drop_to(h, level)

    def add(self, a, b):
        return self.ev.add(a, b)

    def sub(self, a, b):
        return self.ev.sub(a, b)

    def add_plain(self, a, values):
        return self.ev.add_plain(a, values)

    def mul(self, a, b):
        return self.ev.mul(a, b)

    def mul_plain(self, a, values):
        return self.ev.mul_plain(a, values)

    def mul_int(self, a, k):
        return self.ev.mul_int(a, k)

    def rescale(self, a):
        return self.ev.rescale(a)

    def rotate(self, a, k):
        return self.ev.rotate(a, k)

    def rotate_many(self, a, ks):
        return self.ev.rotate_many(a, ks)


# ---------------------------------------------------------------------------
# the machine
# ---------------------------------------------------------------------------


@dataclass(slots=True, eq=False)
class SlotVector:
    handle: object = field(repr=False)
    length: int
    level: int
    scale: float


class SlotVM:
    def __init__(self, backend, trace: TraceRecord | None = None):
        self.backend = backend
        self.trace = trace if trace is not None else TraceRecord()
        self._events = self.trace.events
        self._stage: str | None = None

    @property
    def slot_count(self) -> int:
        return self.backend.slot_count

    @property
    def max_level(self) -> int:
        return self.backend.max_level

    @contextlib.contextmanager
    def stage(self, name: str):
        prev, self._stage = self._stage, name
        try:
            yield
        finally:
            self._stage = prev

    def _emit(self, kind, length, level, arg=None):
        self._events.append(Event(kind, length, level, arg))

    def _wrap(self, h, length) -> SlotVector:
        return SlotVector(h, int(length), h.level, h.scale)

    # -- inputs -------------------------------------------------------------

    def input(self, handle, length: int) -> SlotVector:
        if not 0 < length <= self.slot_count:
            raise ValueError(f"length {length} outside 1..{self.slot_count}")
        self._emit("input", length, handle.level)
        return self._wrap(handle, length)

    def relabel(self, x: SlotVector, length: int) -> SlotVector:
        return SlotVector(x.handle, int(length), x.level, x.scale)

    # -- alignment ----------------------------------------------------------

    def _lower(self, x: SlotVector, level: int) -> SlotVector:
        if x.level == level:
            return x
        be = self.backend
        h = be.drop_to(x.handle, level + 1)
        q = be.params.chain.data_primes[level + 1]
        k = int(round(be.scale_at(level) * q / h.scale))
        h = be.rescale(be.mul_int(h, k))
        self._emit("align", x.length, level, x.level)
        return self._wrap(h, x.length)

    def align(self, a: SlotVector, b: SlotVector):
        lvl = min(a.level, b.level)
        return self._lower(a, lvl), self._lower(b, lvl)

    def lower_to(self, x: SlotVector, level: int) -> SlotVector:
        if level > x.level:
            raise ValueError("cannot raise a level")
        return self._lower(x, level)

    # -- primitives ---------------------------------------------------------

    def add(self, a: SlotVector, b: SlotVector) -> SlotVector:
        a, b = self.align(a, b)
        n = max(a.length, b.length)
        self._emit("add", n, a.level)
        return self._wrap(self.backend.add(a.handle, b.handle), n)

    def sub(self, a: SlotVector, b: SlotVector) -> SlotVector:
        a, b = self.align(a, b)
        n = max(a.length, b.length)
        self._emit("sub", n, a.level)
        return self._wrap(self.backend.sub(a.handle, b.handle), n)

    def add_plain(self, a: SlotVector, values) -> SlotVector:
        self._emit("addPt", a.length, a.level, plain_digest(values))
        return self._wrap(self.backend.add_plain(a.handle, values), a.length)

    def _need_level(self, x: SlotVector, what: str):
        if x.level < 1:
            raise DepthBudgetError(self._stage, f"{what} needs a level but operand is at level 0")

    def mul(self, a: SlotVector, b: SlotVector) -> SlotVector:
        a, b = self.align(a, b)
        self._need_level(a, "mulCt")
        n = max(a.length, b.length)
        self._emit("mulCt", n, a.level)
        h = self.backend.mul(a.handle, b.handle)
        self._emit("rescale", n, a.level - 1)
        return self._wrap(self.backend.rescale(h), n)

    def square(self, a: SlotVector) -> SlotVector:
        return self.mul(a, a)

    def mul_plain(self, a: SlotVector, values, length: int | None = None, digest: str | None = None) -> SlotVector:
        self._need_level(a, "mulPt")
        n = a.length if length is None else length
        self._emit("mulPt", n, a.level, digest or plain_digest(values))
        h = self.backend.mul_plain(a.handle, values)
        self._emit("rescale", n, a.level - 1)
        return self._wrap(self.backend.rescale(h), n)

    def dot_plain(self, terms, length: int | None = None) -> SlotVector:
        """``sum_i x_i * p_i`` for ``terms = [(x_i, p_i[, digest_i]), ...]``
        with a single rescale at the end. Depth 1."""
        terms = list(terms)
        if not terms:
            raise ValueError("empty sum")
        lvl = min(t[0].level for t in terms)
        n = length if length is not None else max(t[0].length for t in terms)
        acc = None
        for t in terms:
            x = self._lower(t[0], lvl)
            self._need_level(x, "mulPt")
            self._emit("mulPt", n, lvl, t[2] if len(t) > 2 and t[2] else plain_digest(t[1]))
            h = self.backend.mul_plain(x.handle, t[1])
            if acc is None:
                acc = h
            else:
                self._emit("add", n, lvl)
                acc = self.backend.add(acc, h)
        self._emit("rescale", n, lvl - 1)
        return self._wrap(self.backend.rescale(acc), n)

    def rotate(self, a: SlotVector, k: int) -> SlotVector:
        k = int(k) % self.slot_count
        if k == 0:
            return a
        self._emit("rotate", a.length, a.level, k)
        return self._wrap(self.backend.rotate(a.handle, k), a.length)

    def rotate_many(self, a: SlotVector, ks) -> list:
        """Rotations of one vector by several amounts. Same trace as calling
        :meth:`rotate` for each; backends may share work between them."""
        ks = [int(k) % self.slot_count for k in ks]
        for k in ks:
            if k:
                self._emit("rotate", a.length, a.level, k)
        live = [k for k in ks if k]
        hoist = getattr(self.backend, "rotate_many", None)
        if hoist is not None and len(live) > 1:
            hs = iter(hoist(a.handle, live))
        else:
            hs = iter([self.backend.rotate(a.handle, k) for k in live])
        return [a if k == 0 else self._wrap(next(hs), a.length) for k in ks]

    # -- conveniences -------------------------------------------------------

    def add_many(self, xs) -> SlotVector:
        xs = list(xs)
        if not xs:
            raise ValueError("empty sum")
        acc = xs[0]
        for x in xs[1:]:
            acc = self.add(acc, x)
        return acc


# ---------------------------------------------------------------------------
# backend construction
# ---------------------------------------------------------------------------


class SimClient:
    def __init__(self, sim: ExactSim):
        self.sim = sim

    slot_count = property(lambda self: self.sim.slot_count)

    def encrypt(self, values, level=None):
        return self.sim.encrypt(values, level)

    def decrypt(self, handle, length=None):
        return self.sim.decrypt(handle, length)


@dataclass
class Session:
    """A client (encrypt/decrypt) and an evaluator backend for one run."""

    kind: str
    params: CkksParams
    client: object
    backend: object
    keys: object = None

    def new_vm(self, config_digest: str = "") -> SlotVM:
        return SlotVM(self.backend, TraceRecord(config_digest))


def exactsim_session(params: CkksParams, rotations=None) -> Session:
    sim = ExactSim(params, rotations)
    return Session("exactsim", params, SimClient(sim), sim)


def levelsim_session(params: CkksParams) -> Session:
    sim = LevelSim(params)
    return Session("levelsim", params, SimClient(sim), sim)


def ckks_session(params: CkksParams, rotations, seed=None, keys=None) -> Session:
    if keys is None:
        keys = keygen(params, rotations, seed=seed)
    client = CkksClient(keys, seed=None if seed is None else seed + 1)
    backend = CkksBackend(CkksEvaluator(params, keys.evaluation_keys()))
    return Session("ckks", params, client, backend, keys)
