"""Leveled RNS-CKKS over the ring substrate.

Ciphertexts are kept in evaluation (NTT) form, so slot rotations are column
permutations followed by a key switch. Key switching decomposes the switched
polynomial into one centred digit per active RNS prime and uses a single
special prime ``P`` to divide the digit noise back down. Several rotations
of one ciphertext share a single decomposition (hoisting).

Scale management is per level: a fresh ciphertext at the top level carries
``2**scaling_bits``, and level ``l-1`` carries ``scale_l**2 / q_l``, which is
exactly what a product at level ``l`` holds after rescaling. Operands that
meet at different levels are aligned by dropping primes from the fresher one,
multiplying by an integer constant and rescaling once, so every ciphertext at
a given level shares (to ~2^-40 relative) the same scale.
"""

from __future__ import annotations

import functools
import hashlib
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .ring import U64, Basis, DepthExhausted, ModulusChain, RingError, crt_reconstruct, get_basis

# Homomorphic Encryption Standard, ternary secret, 128-bit classical security.
HE_STD_MAX_LOGQ = {1024: 27, 2048: 54, 4096: 109, 8192: 218, 16384: 438, 32768: 881}

DESK = "desk-scale"
STANDARD_128 = "standard-128"
INSECURE_TAG = "NOT SECURE (desk-scale parameters)"


class CkksError(RuntimeError):
    pass


class MissingGaloisKey(CkksError, KeyError):
    pass


class ScaleMismatch(CkksError):
    pass


class EncodingOverflow(CkksError, OverflowError):
    pass


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CkksParams:
    chain: ModulusChain
    sigma: float = 3.2
    security: str = DESK

    def __post_init__(self):
        n = self.chain.n
        if self.security == STANDARD_128:
            if n < 32768:
                raise CkksError("standard-128 profile requires N >= 32768")
            if self.chain.total_bits > HE_STD_MAX_LOGQ.get(n, 0):
                raise CkksError("modulus too large for 128-bit security at this N")
        elif self.security != DESK:
            raise CkksError(f"unknown security profile {self.security!r}")

    @classmethod
    def desk(cls, n: int = 4096, depth: int = 11, scaling_bits: int = 40, edge_bits: int = 60):
        return cls(ModulusChain.build(n, depth, scaling_bits, edge_bits), 3.2, DESK)

    @classmethod
    def standard128(cls, depth: int = 11, scaling_bits: int = 40, edge_bits: int = 60):
        return cls(ModulusChain.build(32768, depth, scaling_bits, edge_bits), 3.2, STANDARD_128)

    @property
    def n(self) -> int:
        return self.chain.n

    @property
    def slot_count(self) -> int:
        return self.chain.n // 2

    @property
    def max_level(self) -> int:
        return self.chain.depth

    @property
    def tag(self) -> str:
        return INSECURE_TAG if self.security == DESK else "128-bit (HE standard table)"

    @functools.cached_property
    def scales(self) -> tuple:
        s = [0.0] * (self.max_level + 1)
        s[self.max_level] = float(2**self.chain.scaling_bits)
        for lvl in range(self.max_level, 0, -1):
            s[lvl - 1] = s[lvl] * s[lvl] / self.chain.data_primes[lvl]
        return tuple(s)

    def scale_at(self, level: int) -> float:
        return self.scales[level]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(repr((self.n, self.chain.primes, self.chain.scaling_bits, self.sigma, self.security)).encode())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# canonical embedding
# ---------------------------------------------------------------------------


class Encoder:
    """Slot j sits at the root ``zeta**(5**j)``, so ``X -> X**5`` rotates left by one."""

    def __init__(self, n: int):
        self.n = n
        self.slots = n // 2
        m = 2 * n
        e = np.empty(self.slots, dtype=np.int64)
        acc = 1
        for j in range(self.slots):
            e[j] = acc
            acc = acc * 5 % m
        self.exps = e
        self.conj_exps = (m - e) % m

    def embed_inverse(self, values) -> np.ndarray:
        """Real coefficient vector whose embedding equals ``values`` (zero padded)."""
        z = np.zeros(self.slots, dtype=np.complex128)
        v = np.asarray(values)
        if v.ndim != 1 or v.size > self.slots:
            raise CkksError(f"at most {self.slots} slot values accepted")
        z[: v.size] = v
        b = np.zeros(2 * self.n, dtype=np.complex128)
        b[self.exps] = z
        b[self.conj_exps] = np.conj(z)
        return np.fft.fft(b)[: self.n].real / self.n

    def embed(self, coeffs) -> np.ndarray:
        a = np.zeros(2 * self.n, dtype=np.complex128)
        a[: self.n] = coeffs
        full = np.fft.ifft(a) * (2 * self.n)
        return full[self.exps]


@functools.lru_cache(maxsize=8)
def get_encoder(n: int) -> Encoder:
    return Encoder(n)


def scaled_integers(coeffs: np.ndarray, scale: float, modulus: int):
    """Round ``coeffs*scale`` to integers, as int64 when they fit."""
    x = np.rint(np.asarray(coeffs, dtype=np.float64) * scale)
    if not np.all(np.isfinite(x)):
        raise EncodingOverflow("non-finite value in encoding")
    peak = float(np.max(np.abs(x))) if x.size else 0.0
    if peak >= modulus / 2:
        raise EncodingOverflow(f"scaled value {peak:.3g} exceeds modulus")
    if peak < 2.0**62:
        return x.astype(np.int64)
    return np.array([int(v) for v in x], dtype=object)


def _residues(basis: Basis, ints) -> np.ndarray:
    if isinstance(ints, np.ndarray) and ints.dtype == np.int64:
        return basis.reduce_signed(ints)
    return basis.reduce_objects(ints)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def sample_ternary(rng, n) -> np.ndarray:
    return rng.integers(-1, 2, n).astype(np.int64)


def sample_gaussian(rng, n, sigma) -> np.ndarray:
    bound = 6.0 * sigma
    x = np.rint(rng.normal(0.0, sigma, n))
    bad = np.abs(x) > bound
    while bad.any():
        x[bad] = np.rint(rng.normal(0.0, sigma, int(bad.sum())))
        bad = np.abs(x) > bound
    return x.astype(np.int64)


def sample_uniform(rng, basis: Basis) -> np.ndarray:
    return np.stack([rng.integers(0, p, basis.n, dtype=U64) for p in basis.primes])


# ---------------------------------------------------------------------------
# keys and ciphertexts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SwitchKey:
    """One digit per data prime; arrays are (L+1, L+2, N) over data primes + P."""

    b: np.ndarray = field(repr=False)
    a: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class PublicKey:
    b: np.ndarray = field(repr=False)
    a: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class SecretKey:
    coeffs: np.ndarray = field(repr=False)  # int8 ternary


@dataclass(frozen=True)
class EvaluationKeys:
    """Everything the untrusted evaluator needs: no secret material."""

    params_digest: str
    relin: SwitchKey
    galois: dict

    @property
    def rotations(self) -> frozenset:
        return frozenset(self.galois)


@dataclass(frozen=True)
class KeySet:
    params: CkksParams
    secret: SecretKey
    public: PublicKey
    relin: SwitchKey
    galois: dict

    def evaluation_keys(self) -> EvaluationKeys:
        return EvaluationKeys(self.params.digest(), self.relin, dict(self.galois))


@dataclass
class Ciphertext:
    polys: np.ndarray  # (2 or 3, level+1, N), evaluation form
    level: int
    scale: float

    @property
    def size(self) -> int:
        return self.polys.shape[0]

    def copy(self) -> "Ciphertext":
        return Ciphertext(self.polys.copy(), self.level, self.scale)


def normalize_rotation(k: int, slots: int) -> int:
    return int(k) % slots


class _Ctx:
    """Shared precomputation for a parameter set (tables, permutations)."""

    def __init__(self, params: CkksParams):
        self.params = params
        self.chain = params.chain
        self.n = params.n
        self.encoder = get_encoder(self.n)
        self.full = self.chain.extended_basis(self.chain.depth)
        self._eval_exps = self._evaluation_exponents()
        self._perm_cache: dict[int, np.ndarray] = {}

    def _evaluation_exponents(self) -> np.ndarray:
        # position i of the forward transform evaluates at psi**exps[i]
        basis = self.chain.level_basis(0)
        q = basis.primes[0]
        psi = basis.tables[0].psi_root
        x = np.zeros((1, self.n), dtype=U64)
        x[0, 1] = 1
        ev = basis.ntt(x)[0]
        lookup = {}
        acc = psi
        sq = psi * psi % q
        for e in range(1, 2 * self.n, 2):
            lookup[acc] = e
            acc = acc * sq % q
        return np.array([lookup[int(v)] for v in ev], dtype=np.int64)

    def galois_element(self, k: int) -> int:
        return pow(5, normalize_rotation(k, self.params.slot_count), 2 * self.n)

    def permutation(self, g: int) -> np.ndarray:
        perm = self._perm_cache.get(g)
        if perm is None:
            m = 2 * self.n
            pos = np.empty(m, dtype=np.int64)
            pos[self._eval_exps] = np.arange(self.n)
            perm = pos[(self._eval_exps * g) % m]
            self._perm_cache[g] = perm
        return perm

    def level_basis(self, level: int) -> Basis:
        return self.chain.level_basis(level)

    def ext_index(self, level: int) -> np.ndarray:
        return np.array([*range(level + 1), self.chain.depth + 1])

    def to_eval(self, ints, basis: Basis) -> np.ndarray:
        return basis.ntt(_residues(basis, ints))

    def encode(self, values, scale: float, level: int) -> np.ndarray:
        basis = self.level_basis(level)
        coeffs = self.encoder.embed_inverse(values)
        ints = scaled_integers(coeffs, scale, _modulus(basis))
        return self.to_eval(ints, basis)

    def divide_last(self, x: np.ndarray, primes: tuple) -> np.ndarray:
        """Exact divide-and-round of evaluation-form rows by the last prime.

        Only the dropped row goes back to coefficient form; its centred
        residue is moved into the remaining primes and subtracted there.
        """
        ql = primes[-1]
        lower = get_basis(primes[:-1], self.n)
        last = get_basis((ql,), self.n).intt(x[-1:])[0].astype(np.int64)
        half = (ql - 1) // 2
        r = np.where(last > half, last - np.int64(ql), last)
        diff = lower.sub(x[:-1], lower.ntt(lower.reduce_signed(r)))
        return lower.mul_scalar(diff, _inverses(primes))


@functools.lru_cache(maxsize=64)
def _inverses(primes: tuple) -> list:
    return [pow(primes[-1], -1, p) for p in primes[:-1]]


@functools.lru_cache(maxsize=64)
def _modulus_of(primes: tuple) -> int:
    m = 1
    for p in primes:
        m *= p
    return m


def _modulus(basis: Basis) -> int:
    return _modulus_of(basis.primes)


@functools.lru_cache(maxsize=8)
def get_context(params: CkksParams) -> _Ctx:
    return _Ctx(params)


# ---------------------------------------------------------------------------
# key generation
# ---------------------------------------------------------------------------


def _switch_key(ctx: _Ctx, rng, s_eval: np.ndarray, target_eval: np.ndarray) -> SwitchKey:
    """Key switching from ``target`` to ``s``; both given over the full extended basis."""
    full = ctx.full
    depth = ctx.chain.depth
    special = ctx.chain.special_prime
    digits = depth + 1
    bs = np.empty((digits, len(full), ctx.n), dtype=U64)
    as_ = np.empty_like(bs)
    p_target = full.mul_scalar(target_eval, [special] * len(full))
    for j in range(digits):
        a = sample_uniform(rng, full)
        e = ctx.to_eval(sample_gaussian(rng, ctx.n, ctx.params.sigma), full)
        b = full.sub(e, full.mul(a, s_eval))
        b[j] = full.add(b[j : j + 1], p_target[j : j + 1])[0]
        bs[j] = b
        as_[j] = a
    return SwitchKey(bs, as_)


def keygen(params: CkksParams, rotations=(), seed=None) -> KeySet:
    """Generate a key set with one Galois key per distinct rotation amount."""
    ctx = get_context(params)
    rng = np.random.default_rng(seed)
    full = ctx.full
    s = sample_ternary(rng, params.n)
    s_eval = ctx.to_eval(s, full)

    top = ctx.chain.depth
    top_basis = ctx.level_basis(top)
    s_top = s_eval[: top + 1]
    a = sample_uniform(rng, top_basis)
    e = ctx.to_eval(sample_gaussian(rng, params.n, params.sigma), top_basis)
    pk = PublicKey(top_basis.sub(e, top_basis.mul(a, s_top)), a)

    relin = _switch_key(ctx, rng, s_eval, full.mul(s_eval, s_eval))
    galois = {}
    for k in sorted({normalize_rotation(k, params.slot_count) for k in rotations}):
        if k == 0:
            continue
        g = ctx.galois_element(k)
        s_rot = s_eval[:, ctx.permutation(g)]
        galois[k] = _switch_key(ctx, rng, s_eval, s_rot)
    return KeySet(params, SecretKey(s.astype(np.int8)), pk, relin, galois)


# ---------------------------------------------------------------------------
# client: encrypt / decrypt
# ---------------------------------------------------------------------------


class CkksClient:
    """Holder of the secret key. Encrypts inputs and decrypts authorized outputs."""

    def __init__(self, keys: KeySet, seed=None):
        self.keys = keys
        self.params = keys.params
        self.ctx = get_context(keys.params)
        self.rng = np.random.default_rng(seed)
        self._s_eval = self.ctx.to_eval(keys.secret.coeffs.astype(np.int64), self.ctx.full)

    @property
    def slot_count(self) -> int:
        return self.params.slot_count

    def encrypt(self, values, level: int | None = None) -> Ciphertext:
        ctx = self.ctx
        lvl = self.params.max_level if level is None else level
        basis = ctx.level_basis(lvl)
        scale = self.params.scale_at(lvl)
        m = ctx.encode(values, scale, lvl)
        n = self.params.n
        v = ctx.to_eval(sample_ternary(self.rng, n), basis)
        e0 = ctx.to_eval(sample_gaussian(self.rng, n, self.params.sigma), basis)
        e1 = ctx.to_eval(sample_gaussian(self.rng, n, self.params.sigma), basis)
        pk = self.keys.public
        c0 = basis.add(basis.add(basis.mul(v, pk.b[: lvl + 1]), e0), m)
        c1 = basis.add(basis.mul(v, pk.a[: lvl + 1]), e1)
        return Ciphertext(np.stack([c0, c1]), lvl, scale)

    def decrypt_coeffs(self, ct: Ciphertext) -> np.ndarray:
        basis = self.ctx.level_basis(ct.level)
        s = self._s_eval[: ct.level + 1]
        acc = ct.polys[0].copy()
        power = s
        for i in range(1, ct.size):
            basis.muladd(acc, ct.polys[i], power)
            power = basis.mul(power, s)
        ints = crt_reconstruct(basis.intt(acc), basis.primes)
        return ints.astype(np.float64) / ct.scale

    def decrypt(self, ct: Ciphertext, length: int | None = None) -> np.ndarray:
        vals = self.ctx.encoder.embed(self.decrypt_coeffs(ct)).real
        return vals if length is None else vals[:length]


# ---------------------------------------------------------------------------
# evaluator
# ---------------------------------------------------------------------------


class CkksEvaluator:
    """Homomorphic operations. Holds evaluation keys only."""

    def __init__(self, params: CkksParams, keys: EvaluationKeys):
        if keys.params_digest != params.digest():
            raise CkksError("evaluation keys were generated for different parameters")
        self.params = params
        self.keys = keys
        self.ctx = get_context(params)
        self._plain_cache: OrderedDict = OrderedDict()

    PLAIN_CACHE_SIZE = 256

    def encode_plain(self, values, scale: float, level: int) -> np.ndarray:
        """Encoded plaintext, memoized: DFT, filter and FC operands repeat."""
        v = np.ascontiguousarray(values, dtype=np.float64)
        key = (hashlib.blake2b(v.tobytes(), digest_size=16).digest(), v.size, scale, level)
        m = self._plain_cache.get(key)
        if m is None:
            m = self.ctx.encode(v, scale, level)
            m.flags.writeable = False
            self._plain_cache[key] = m
            if len(self._plain_cache) > self.PLAIN_CACHE_SIZE:
                self._plain_cache.popitem(last=False)
        else:
            self._plain_cache.move_to_end(key)
        return m

    @property
    def slot_count(self) -> int:
        return self.params.slot_count

    @property
    def max_level(self) -> int:
        return self.params.max_level

    def scale_at(self, level: int) -> float:
        return self.params.scale_at(level)

    # -- structural ---------------------------------------------------------

    def drop_to(self, ct: Ciphertext, level: int) -> Ciphertext:
        if level > ct.level:
            raise CkksError("cannot raise a ciphertext level")
        return Ciphertext(ct.polys[:, : level + 1].copy(), level, ct.scale)

    def _check_pair(self, a: Ciphertext, b: Ciphertext):
        if a.level != b.level:
            raise CkksError(f"level mismatch {a.level} != {b.level}")
        if abs(a.scale / b.scale - 1.0) > 1e-9:
            raise ScaleMismatch(f"scale mismatch {a.scale:.6g} vs {b.scale:.6g}")

    # -- additive -----------------------------------------------------------

    def add(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        self._check_pair(a, b)
        basis = self.ctx.level_basis(a.level)
        size = max(a.size, b.size)
        out = np.zeros((size, a.level + 1, self.params.n), dtype=U64)
        out[: a.size] = a.polys
        for i in range(b.size):
            out[i] = basis.add(out[i], b.polys[i])
        return Ciphertext(out, a.level, a.scale)

    def negate(self, a: Ciphertext) -> Ciphertext:
        basis = self.ctx.level_basis(a.level)
        return Ciphertext(np.stack([basis.neg(p) for p in a.polys]), a.level, a.scale)

    def sub(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        return self.add(a, self.negate(b))

    def add_plain(self, a: Ciphertext, values) -> Ciphertext:
        basis = self.ctx.level_basis(a.level)
        m = self.encode_plain(values, a.scale, a.level)
        out = a.polys.copy()
        out[0] = basis.add(out[0], m)
        return Ciphertext(out, a.level, a.scale)

    # -- multiplicative -----------------------------------------------------

    def mul(self, a: Ciphertext, b: Ciphertext, relin: bool = True) -> Ciphertext:
        self._check_pair(a, b)
        if a.size != 2 or b.size != 2:
            raise CkksError("relinearize before multiplying")
        basis = self.ctx.level_basis(a.level)
        a0, a1 = a.polys
        b0, b1 = b.polys
        d0 = basis.mul(a0, b0)
        d1 = basis.mul(a0, b1)
        basis.muladd(d1, a1, b0)
        d2 = basis.mul(a1, b1)
        ct = Ciphertext(np.stack([d0, d1, d2]), a.level, a.scale * b.scale)
        return self.relinearize(ct) if relin else ct

    def mul_plain(self, a: Ciphertext, values) -> Ciphertext:
        scale = self.params.scale_at(a.level)
        m = self.encode_plain(values, scale, a.level)
        basis = self.ctx.level_basis(a.level)
        polys = np.stack([basis.mul(p, m) for p in a.polys])
        return Ciphertext(polys, a.level, a.scale * scale)

    def mul_int(self, a: Ciphertext, k: int) -> Ciphertext:
        basis = self.ctx.level_basis(a.level)
        polys = np.stack([basis.mul_scalar(p, [k] * len(basis)) for p in a.polys])
        return Ciphertext(polys, a.level, a.scale * k)

    def rescale(self, a: Ciphertext) -> Ciphertext:
        if a.level < 1:
            raise DepthExhausted("no level left to rescale")
        primes = self.ctx.level_basis(a.level).primes
        out = np.stack([self.ctx.divide_last(p, primes) for p in a.polys])
        q = self.ctx.chain.data_primes[a.level]
        return Ciphertext(out, a.level - 1, a.scale / q)

    # -- key switching ------------------------------------------------------

    def _decompose(self, d: np.ndarray, level: int) -> np.ndarray:
        """Per-prime digits of ``d`` lifted to the extended basis, evaluation form."""
        basis = self.ctx.level_basis(level)
        ext = self.ctx.chain.extended_basis(level)
        coeff = basis.intt(d).astype(np.int64)
        out = []
        for j, q in enumerate(basis.primes):
            c = coeff[j]
            c = np.where(c > (q - 1) // 2, c - np.int64(q), c)  # centred digit
            out.append(ext.ntt(ext.reduce_signed(c)))
        return np.stack(out)

    def _switch_digits(self, digits: np.ndarray, level: int, key: SwitchKey, perm=None):
        ext = self.ctx.chain.extended_basis(level)
        idx = self.ctx.ext_index(level)
        acc0 = np.zeros(digits.shape[1:], dtype=U64)
        acc1 = np.zeros_like(acc0)
        for j in range(level + 1):
            dj = digits[j] if perm is None else digits[j][:, perm]
            ext.muladd_redc(acc0, dj, key.b[j][idx])
            ext.muladd_redc(acc1, dj, key.a[j][idx])
        acc0, acc1 = ext.times_r(acc0), ext.times_r(acc1)
        return self._mod_down(acc0, level), self._mod_down(acc1, level)

    def _key_switch(self, d: np.ndarray, level: int, key: SwitchKey):
        return self._switch_digits(self._decompose(d, level), level, key)

    def _mod_down(self, x: np.ndarray, level: int) -> np.ndarray:
        return self.ctx.divide_last(x, self.ctx.chain.extended_basis(level).primes)

    def relinearize(self, a: Ciphertext) -> Ciphertext:
        if a.size == 2:
            return a
        basis = self.ctx.level_basis(a.level)
        u0, u1 = self._key_switch(a.polys[2], a.level, self.keys.relin)
        return Ciphertext(np.stack([basis.add(a.polys[0], u0), basis.add(a.polys[1], u1)]), a.level, a.scale)

    def rotate(self, a: Ciphertext, k: int) -> Ciphertext:
        return self.rotate_many(a, [k])[0]

    def rotate_many(self, a: Ciphertext, ks) -> list:
        """Several rotations of one ciphertext with a shared (hoisted) digit
        decomposition: the automorphism is applied to the decomposed digits,
        which in evaluation form is a slot permutation."""
        ks = [normalize_rotation(k, self.slot_count) for k in ks]
        for k in ks:
            if k and k not in self.keys.galois:
                raise MissingGaloisKey(f"no Galois key for rotation {k}")
        if not any(ks):
            return [a] * len(ks)
        if a.size != 2:
            a = self.relinearize(a)
        digits = self._decompose(a.polys[1], a.level)
        basis = self.ctx.level_basis(a.level)
        out = []
        for k in ks:
            if k == 0:
                out.append(a)
                continue
            perm = self.ctx.permutation(self.ctx.galois_element(k))
            u0, u1 = self._switch_digits(digits, a.level, self.keys.galois[k], perm)
            out.append(Ciphertext(np.stack([basis.add(a.polys[0][:, perm], u0), u1]), a.level, a.scale))
        return out
