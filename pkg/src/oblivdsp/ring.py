"""Negacyclic RNS polynomial arithmetic over word-sized NTT-friendly primes.

Residues live in ``uint64`` arrays of shape ``(#primes, N)``. Products of two
residues use a native 64x64 -> 128 bit multiply (an LLVM intrinsic) and
are reduced with Montgomery's method or with Shoup's precomputed quotients,
so no arbitrary-precision integers are touched on the hot path. Python integers appear only in table
construction and in the CRT reconstruction used by decoding and tests.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numba
import numpy as np
from llvmlite import ir
from numba import types
from numba.extending import intrinsic
from sympy import isprime

U64 = np.uint64
_ONE = np.uint64(1)
_ZERO = np.uint64(0)

# Largest supported prime size; keeps 2q < 2^63 so lazy sums never wrap.
MAX_PRIME_BITS = 61


class RingError(ValueError):
    """Invalid ring configuration or operand mismatch."""


class DepthExhausted(RuntimeError):
    """Raised when an operation needs a level that is no longer available."""


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------


@intrinsic
def _mulhi(typingctx, a, b):
    """High word of the 128-bit product of two uint64 (one native multiply)."""
    sig = types.uint64(types.uint64, types.uint64)

    def codegen(context, builder, signature, args):
        i128 = ir.IntType(128)
        prod = builder.mul(builder.zext(args[0], i128), builder.zext(args[1], i128))
        return builder.trunc(builder.lshr(prod, ir.Constant(i128, 64)), ir.IntType(64))

    return sig, codegen


@numba.njit(inline="always", cache=True)
def _montmul(a, b, q, qneg_inv):
    # (a*b + m*q) / 2^64 with m chosen so the low word cancels.
    lo = a * b
    hi = _mulhi(a, b)
    m = lo * qneg_inv
    t = hi + _mulhi(m, q) + np.uint64(lo != _ZERO)
    return min(t, t - q)


@numba.njit(inline="always", cache=True)
def _shoupmul(x, w, wq, q):
    # x*w mod q with wq = floor(w * 2^64 / q); the result lands in [0, 2q).
    r = x * w - _mulhi(x, wq) * q
    return min(r, r - q)


@numba.njit(cache=True)
def _ntt_forward_rows(a, q, psi, psi_q):
    k, n = a.shape
    for row in range(k):
        qr = q[row]
        x = a[row]
        tab = psi[row]
        tabq = psi_q[row]
        t = n
        m = 1
        while m < n:
            t >>= 1
            for i in range(m):
                j1 = 2 * i * t
                s = tab[m + i]
                sq = tabq[m + i]
                for j in range(j1, j1 + t):
                    u = x[j]
                    v = _shoupmul(x[j + t], s, sq, qr)
                    w = u + v
                    x[j] = min(w, w - qr)
                    d = u + qr - v
                    x[j + t] = min(d, d - qr)
            m <<= 1


@numba.njit(cache=True)
def _ntt_inverse_rows(a, q, ipsi, ipsi_q, ninv, ninv_q):
    k, n = a.shape
    for row in range(k):
        qr = q[row]
        x = a[row]
        tab = ipsi[row]
        tabq = ipsi_q[row]
        t = 1
        m = n
        while m > 1:
            h = m >> 1
            j1 = 0
            for i in range(h):
                s = tab[h + i]
                sq = tabq[h + i]
                for j in range(j1, j1 + t):
                    u = x[j]
                    v = x[j + t]
                    w = u + v
                    x[j] = min(w, w - qr)
                    d = u + qr - v
                    x[j + t] = _shoupmul(min(d, d - qr), s, sq, qr)
                j1 += 2 * t
            t <<= 1
            m = h
        c = ninv[row]
        cq = ninv_q[row]
        for j in range(n):
            x[j] = _shoupmul(x[j], c, cq, qr)


@numba.njit(cache=True)
def _mulmod_rows(a, b, q, qneg, r2):
    k, n = a.shape
    out = np.empty_like(a)
    for row in range(k):
        qr = q[row]
        qn = qneg[row]
        c = r2[row]
        for j in range(n):
            out[row, j] = _montmul(_montmul(a[row, j], b[row, j], qr, qn), c, qr, qn)
    return out


@numba.njit(cache=True)
def _mulmod_scalar_rows(a, s, q, qneg):
    # s[row] must already be in Montgomery form.
    k, n = a.shape
    out = np.empty_like(a)
    for row in range(k):
        qr = q[row]
        qn = qneg[row]
        c = s[row]
        for j in range(n):
            out[row, j] = _montmul(a[row, j], c, qr, qn)
    return out


@numba.njit(cache=True)
def _muladd_rows(acc, a, b, q, qneg, r2):
    # acc += a*b (mod q), all operands reduced.
    k, n = a.shape
    for row in range(k):
        qr = q[row]
        qn = qneg[row]
        c = r2[row]
        for j in range(n):
            w = acc[row, j] + _montmul(_montmul(a[row, j], b[row, j], qr, qn), c, qr, qn)
            acc[row, j] = min(w, w - qr)


@numba.njit(cache=True)
def _muladd_redc_rows(acc, a, b, q, qneg):
    # acc += a*b*2^-64 (mod q): one Montgomery reduction per product.
    k, n = a.shape
    for row in range(k):
        qr = q[row]
        qn = qneg[row]
        for j in range(n):
            w = acc[row, j] + _montmul(a[row, j], b[row, j], qr, qn)
            acc[row, j] = min(w, w - qr)


@numba.njit(cache=True)
def _add_rows(a, b, q):
    k, n = a.shape
    out = np.empty_like(a)
    for row in range(k):
        qr = q[row]
        for j in range(n):
            w = a[row, j] + b[row, j]
            out[row, j] = min(w, w - qr)
    return out


@numba.njit(cache=True)
def _sub_rows(a, b, q):
    k, n = a.shape
    out = np.empty_like(a)
    for row in range(k):
        qr = q[row]
        for j in range(n):
            d = a[row, j] + qr - b[row, j]
            out[row, j] = min(d, d - qr)
    return out


@numba.njit(cache=True)
def _reduce_signed_rows(x, q):
    k = q.shape[0]
    n = x.shape[0]
    out = np.empty((k, n), dtype=np.uint64)
    for row in range(k):
        qi = np.int64(q[row])
        for j in range(n):
            r = x[j] % qi  # numba follows Python: sign of the divisor
            out[row, j] = np.uint64(r)
    return out


# ---------------------------------------------------------------------------
# primes and tables
# ---------------------------------------------------------------------------


def is_ntt_friendly(q: int, n: int) -> bool:
    return q > 2 and q % (2 * n) == 1 and isprime(q)


def find_ntt_primes(n: int, bits: int, count: int, exclude=()) -> list[int]:
    """Return the ``count`` largest primes ``q < 2**bits`` with ``q = 1 mod 2n``.

    The search is deterministic in ``(n, bits)``; primes listed in ``exclude``
    are skipped so one call can continue where another stopped.
    """
    if bits > MAX_PRIME_BITS:
        raise RingError(f"prime size {bits} exceeds {MAX_PRIME_BITS} bits")
    step = 2 * n
    cand = ((1 << bits) - 1) // step * step + 1
    if cand >= 1 << bits:
        cand -= step
    skip = set(exclude)
    found: list[int] = []
    while len(found) < count:
        if cand < 1 << (bits - 1):
            raise RingError(f"not enough {bits}-bit primes = 1 mod {step}")
        if cand not in skip and isprime(cand):
            found.append(cand)
        cand -= step
    return found


def _bitrev(x: int, nbits: int) -> int:
    return int(format(x, f"0{nbits}b")[::-1], 2) if nbits else 0


def _primitive_2n_root(q: int, n: int) -> int:
    # smallest generator-derived root of order exactly 2n
    e = (q - 1) // (2 * n)
    for g in range(2, 10_000):
        psi = pow(g, e, q)
        if pow(psi, n, q) == q - 1:
            return psi
    raise RingError(f"no primitive {2 * n}-th root mod {q}")


@dataclass(frozen=True)
class PrimeTables:
    """Per-prime constants. Twiddles are in bit-reversed order, in standard
    form, each paired with its Shoup quotient ``floor(w * 2^64 / q)``."""

    q: int
    n: int
    qneg: int
    r2: int
    psi: np.ndarray = field(repr=False)
    psi_q: np.ndarray = field(repr=False)
    ipsi: np.ndarray = field(repr=False)
    ipsi_q: np.ndarray = field(repr=False)
    ninv: int
    ninv_q: int
    psi_root: int

    def to_mont(self, x: int) -> int:
        return (x << 64) % self.q


@functools.lru_cache(maxsize=None)
def prime_tables(q: int, n: int) -> PrimeTables:
    if n < 2 or n & (n - 1):
        raise RingError(f"ring dimension {n} is not a power of two")
    if not is_ntt_friendly(q, n):
        raise RingError(f"{q} is not a prime = 1 mod {2 * n}")
    if q.bit_length() > MAX_PRIME_BITS:
        raise RingError(f"prime {q} exceeds {MAX_PRIME_BITS} bits")
    logn = n.bit_length() - 1
    psi = _primitive_2n_root(q, n)
    ipsi = pow(psi, -1, q)
    pw, ipw = [1] * n, [1] * n
    for i in range(1, n):
        pw[i] = pw[i - 1] * psi % q
        ipw[i] = ipw[i - 1] * ipsi % q
    fwd = [pw[_bitrev(i, logn)] for i in range(n)]
    inv = [ipw[_bitrev(i, logn)] for i in range(n)]

    def shoup(ws):
        return np.array([(w << 64) // q for w in ws], dtype=U64)

    ninv = pow(n, -1, q)
    return PrimeTables(
        q=q,
        n=n,
        qneg=(-pow(q, -1, 1 << 64)) % (1 << 64),
        r2=(1 << 128) % q,
        psi=np.array(fwd, dtype=U64),
        psi_q=shoup(fwd),
        ipsi=np.array(inv, dtype=U64),
        ipsi_q=shoup(inv),
        ninv=ninv,
        ninv_q=(ninv << 64) // q,
        psi_root=psi,
    )


class Basis:
    """Stacked per-prime constants for a fixed ordered list of primes."""

    def __init__(self, primes, n: int):
        self.primes = tuple(int(p) for p in primes)
        if not self.primes:
            raise RingError("empty basis")
        if len(set(self.primes)) != len(self.primes):
            raise RingError("basis primes must be distinct")
        self.n = n
        tabs = [prime_tables(p, n) for p in self.primes]
        self.q = np.array(self.primes, dtype=U64)
        self.qneg = np.array([t.qneg for t in tabs], dtype=U64)
        self.r2 = np.array([t.r2 for t in tabs], dtype=U64)
        self.ninv = np.array([t.ninv for t in tabs], dtype=U64)
        self.ninv_q = np.array([t.ninv_q for t in tabs], dtype=U64)
        self.psi = np.stack([t.psi for t in tabs])
        self.psi_q = np.stack([t.psi_q for t in tabs])
        self.ipsi = np.stack([t.ipsi for t in tabs])
        self.ipsi_q = np.stack([t.ipsi_q for t in tabs])
        self.tables = tabs

    def __len__(self) -> int:
        return len(self.primes)

    def qcol(self) -> np.ndarray:
        return self.q[:, None]

    def ntt(self, a: np.ndarray) -> np.ndarray:
        out = np.array(a, dtype=U64, copy=True)
        _ntt_forward_rows(out, self.q, self.psi, self.psi_q)
        return out

    def intt(self, a: np.ndarray) -> np.ndarray:
        out = np.array(a, dtype=U64, copy=True)
        _ntt_inverse_rows(out, self.q, self.ipsi, self.ipsi_q, self.ninv, self.ninv_q)
        return out

    def mul(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return _mulmod_rows(a, b, self.q, self.qneg, self.r2)

    def muladd(self, acc: np.ndarray, a: np.ndarray, b: np.ndarray) -> None:
        _muladd_rows(acc, a, b, self.q, self.qneg, self.r2)

    def mul_scalar(self, a: np.ndarray, scalars) -> np.ndarray:
        """Multiply row i by ``scalars[i]`` (plain integers, reduced here)."""
        mont = np.array(
            [((int(s) % p) << 64) % p for s, p in zip(scalars, self.primes)], dtype=U64
        )
        return _mulmod_scalar_rows(a, mont, self.q, self.qneg)

    def muladd_redc(self, acc: np.ndarray, a: np.ndarray, b: np.ndarray) -> None:
        """``acc += a*b*2^-64``; undo the factor once with :meth:`times_r`."""
        _muladd_redc_rows(acc, a, b, self.q, self.qneg)

    def times_r(self, a: np.ndarray) -> np.ndarray:
        """``a * 2^64 mod q`` per row."""
        return _mulmod_scalar_rows(a, self.r2, self.q, self.qneg)

    def add(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return _add_rows(a, b, self.q)

    def sub(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return _sub_rows(a, b, self.q)

    def neg(self, a: np.ndarray) -> np.ndarray:
        q = self.qcol()
        return np.where(a == 0, a, q - a)

    def reduce_signed(self, x: np.ndarray) -> np.ndarray:
        """Residues of a signed int64 vector, one row per prime."""
        return _reduce_signed_rows(np.ascontiguousarray(x, dtype=np.int64), self.q)

    def reduce_objects(self, x) -> np.ndarray:
        """Residues of arbitrary Python integers (object array)."""
        x = np.asarray(x, dtype=object)
        return np.stack([np.array(x % p, dtype=U64) for p in self.primes])


@functools.lru_cache(maxsize=256)
def get_basis(primes: tuple, n: int) -> Basis:
    return Basis(primes, n)


# ---------------------------------------------------------------------------
# modulus chain
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModulusChain:
    """Data primes ``q_0..q_L`` plus one special key-switching prime.

    ``q_0`` and the special prime use ``edge_bits``; the ``depth`` interior
    primes use ``scaling_bits``. Rescaling drops interior primes from the end.
    """

    n: int
    scaling_bits: int
    edge_bits: int
    data_primes: tuple
    special_prime: int

    @classmethod
    def build(cls, n: int, depth: int, scaling_bits: int = 40, edge_bits: int = 60):
        if depth < 0:
            raise RingError("depth must be nonnegative")
        if edge_bits == scaling_bits:
            found = find_ntt_primes(n, edge_bits, depth + 2)
            first, special, mids = found[0], found[1], found[2:]
        else:
            first, special = find_ntt_primes(n, edge_bits, 2)
            mids = find_ntt_primes(n, scaling_bits, depth)
        return cls(n, scaling_bits, edge_bits, tuple([first, *mids]), special)

    def __post_init__(self):
        allp = self.primes
        if len(set(allp)) != len(allp):
            raise RingError("chain primes must be distinct")
        for p in allp:
            if not is_ntt_friendly(p, self.n):
                raise RingError(f"{p} is not NTT-friendly for N={self.n}")
        sizes = [self.edge_bits] + [self.scaling_bits] * self.depth + [self.edge_bits]
        for p, b in zip(allp, sizes):
            if abs(np.log2(float(p)) - b) > 1:
                raise RingError(f"prime {p} is not within one bit of {b}")

    @property
    def primes(self) -> tuple:
        return (*self.data_primes, self.special_prime)

    @property
    def depth(self) -> int:
        return len(self.data_primes) - 1

    @property
    def total_bits(self) -> float:
        return float(sum(np.log2(float(p)) for p in self.primes))

    def level_basis(self, level: int) -> Basis:
        if not 0 <= level <= self.depth:
            raise RingError(f"level {level} outside chain of depth {self.depth}")
        return get_basis(self.data_primes[: level + 1], self.n)

    def extended_basis(self, level: int) -> Basis:
        return get_basis((*self.data_primes[: level + 1], self.special_prime), self.n)


# ---------------------------------------------------------------------------
# polynomial value type
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RnsPolynomial:
    coeffs: np.ndarray
    basis: tuple
    form: str = "coeff"

    def __post_init__(self):
        c = self.coeffs
        if c.ndim != 2 or c.shape[0] != len(self.basis):
            raise RingError("coefficient array must be (#primes, N)")
        if self.form not in ("coeff", "eval"):
            raise RingError(f"unknown form {self.form!r}")

    @property
    def n(self) -> int:
        return self.coeffs.shape[1]

    @property
    def _basis(self) -> Basis:
        return get_basis(tuple(self.basis), self.n)

    @classmethod
    def from_ints(cls, values, basis) -> "RnsPolynomial":
        b = get_basis(tuple(basis), len(values))
        vals = np.asarray(values, dtype=object)
        return cls(b.reduce_objects(vals), tuple(basis), "coeff")

    def to_ints(self, centered: bool = True) -> np.ndarray:
        p = self if self.form == "coeff" else ntt_inverse(self)
        return crt_reconstruct(p.coeffs, p.basis, centered=centered)


def ntt_forward(p: RnsPolynomial) -> RnsPolynomial:
    if p.form != "coeff":
        raise RingError("polynomial already in evaluation form")
    return RnsPolynomial(p._basis.ntt(p.coeffs), p.basis, "eval")


def ntt_inverse(p: RnsPolynomial) -> RnsPolynomial:
    if p.form != "eval":
        raise RingError("polynomial already in coefficient form")
    return RnsPolynomial(p._basis.intt(p.coeffs), p.basis, "coeff")


def ring_mul(a: RnsPolynomial, b: RnsPolynomial) -> RnsPolynomial:
    if tuple(a.basis) != tuple(b.basis) or a.n != b.n:
        raise RingError("basis mismatch in ring_mul")
    bs = a._basis
    ea = a.coeffs if a.form == "eval" else bs.ntt(a.coeffs)
    eb = b.coeffs if b.form == "eval" else bs.ntt(b.coeffs)
    prod = bs.mul(ea, eb)
    return RnsPolynomial(bs.intt(prod), a.basis, "coeff")


def rescale_rows(coeffs: np.ndarray, primes) -> np.ndarray:
    """Divide-and-round by the last prime in coefficient form.

    The dropped residue is centred, so ``(x - r) / q_last`` is the nearest
    integer to ``x / q_last`` (``q_last`` is odd, so no exact ties occur).
    """
    primes = tuple(int(p) for p in primes)
    if len(primes) < 2:
        raise DepthExhausted("cannot drop the last remaining prime")
    ql = primes[-1]
    last = coeffs[-1].astype(np.int64)
    half = (ql - 1) // 2
    r = np.where(last > half, last - np.int64(ql), last)
    keep = get_basis(primes[:-1], coeffs.shape[1])
    r_res = keep.reduce_signed(r)
    diff = keep.sub(coeffs[:-1], r_res)
    inv = [pow(ql, -1, p) for p in primes[:-1]]
    return keep.mul_scalar(diff, inv)


def drop_last_prime(p: RnsPolynomial) -> RnsPolynomial:
    """Exact RNS division-and-round by the last active prime."""
    if len(p.basis) < 2:
        raise DepthExhausted("cannot drop the last remaining prime")
    src = p if p.form == "coeff" else ntt_inverse(p)
    out = RnsPolynomial(rescale_rows(src.coeffs, src.basis), tuple(p.basis[:-1]), "coeff")
    return ntt_forward(out) if p.form == "eval" else out


@functools.lru_cache(maxsize=256)
def _crt_constants(primes: tuple):
    big_q = 1
    for p in primes:
        big_q *= p
    consts = []
    for p in primes:
        qi = big_q // p
        consts.append((qi * pow(qi, -1, p)) % big_q)
    return big_q, consts


def crt_reconstruct(coeffs: np.ndarray, primes, centered: bool = True) -> np.ndarray:
    """Map residues to integers in [0, Q) (or centred in (-Q/2, Q/2])."""
    primes = tuple(int(p) for p in primes)
    big_q, consts = _crt_constants(primes)
    acc = np.zeros(coeffs.shape[1], dtype=object)
    for row, c in zip(coeffs, consts):
        acc = acc + row.astype(object) * c
    acc = acc % big_q
    if centered:
        acc = np.where(acc > big_q // 2, acc - big_q, acc)
    return acc
