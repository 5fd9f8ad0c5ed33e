import numpy as np
import pytest
import sympy
from hypothesis import given, settings
from hypothesis import strategies as st

from oblivdsp.ring import (
    DepthExhausted,
    ModulusChain,
    RingError,
    RnsPolynomial,
    crt_reconstruct,
    drop_last_prime,
    find_ntt_primes,
    get_basis,
    ntt_forward,
    ntt_inverse,
    prime_tables,
    ring_mul,
)

N = 32
PRIMES = tuple(find_ntt_primes(N, 40, 2) + find_ntt_primes(N, 60, 1))


def negacyclic(a, b):
    """Schoolbook product in Z[X]/(X^n + 1) with Python integers."""
    n = len(a)
    out = [0] * n
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            k = i + j
            if k < n:
                out[k] += x * y
            else:
                out[k - n] -= x * y
    return out


def test_found_primes_are_largest_ntt_friendly():
    n, bits = 64, 30
    ps = find_ntt_primes(n, bits, 3)
    assert ps == sorted(ps, reverse=True)
    for p in ps:
        assert sympy.isprime(p) and p % (2 * n) == 1 and p < 2**bits
    # nothing larger was skipped
    above = [c for c in range(ps[0] + 2 * n, 2**bits, 2 * n) if sympy.isprime(c)]
    assert above == []
    between = [c for c in range(ps[2] + 2 * n, ps[0], 2 * n) if sympy.isprime(c)]
    assert between == [ps[1]]


def test_exclude_continues_search():
    first = find_ntt_primes(64, 30, 2)
    rest = find_ntt_primes(64, 30, 1, exclude=first)
    assert rest[0] < first[-1]


def test_prime_size_limit():
    with pytest.raises(RingError):
        find_ntt_primes(64, 63, 1)


def test_tables_reject_unfriendly_prime():
    with pytest.raises(RingError):
        prime_tables(97, 64)  # 97 != 1 mod 128
    with pytest.raises(RingError):
        prime_tables(257, 48)


def test_root_has_order_2n():
    t = prime_tables(PRIMES[0], N)
    assert pow(t.psi_root, N, t.q) == t.q - 1


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(-(2**35), 2**35), min_size=N, max_size=N))
def test_ntt_roundtrip(coeffs):
    p = RnsPolynomial.from_ints(coeffs, PRIMES)
    back = ntt_inverse(ntt_forward(p))
    assert np.array_equal(back.coeffs, p.coeffs)
    assert list(back.to_ints()) == coeffs


@settings(max_examples=25, deadline=None)
@given(
    st.lists(st.integers(-(2**20), 2**20), min_size=N, max_size=N),
    st.lists(st.integers(-(2**20), 2**20), min_size=N, max_size=N),
)
def test_ring_mul_matches_schoolbook(a, b):
    pa = RnsPolynomial.from_ints(a, PRIMES)
    pb = RnsPolynomial.from_ints(b, PRIMES)
    assert list(ring_mul(pa, pb).to_ints()) == negacyclic(a, b)


def test_ring_mul_single_prime_wraps():
    q = PRIMES[0]
    a = [q - 1] + [0] * (N - 1)
    b = [0] * (N - 1) + [1]
    got = ring_mul(RnsPolynomial.from_ints(a, (q,)), RnsPolynomial.from_ints(b, (q,)))
    expect = [x % q for x in negacyclic(a, b)]
    assert list(got.to_ints(centered=False)) == expect


def test_x_to_the_n_is_minus_one():
    x = [0] * N
    x[N // 2] = 1
    p = RnsPolynomial.from_ints(x, PRIMES)
    sq = ring_mul(p, p).to_ints()
    assert sq[0] == -1 and not any(sq[1:])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(-(2**120), 2**120), min_size=N, max_size=N))
def test_drop_last_prime_rounds(values):
    p = RnsPolynomial.from_ints(values, PRIMES)
    q = PRIMES[-1]
    got = drop_last_prime(p).to_ints()
    for v, g in zip(values, got):
        assert abs(g * q - v) * 2 <= q


def test_drop_last_prime_eval_form_kept():
    p = ntt_forward(RnsPolynomial.from_ints(list(range(N)), PRIMES))
    out = drop_last_prime(p)
    assert out.form == "eval" and len(out.basis) == 2


def test_cannot_drop_only_prime():
    p = RnsPolynomial.from_ints([1] * N, PRIMES[:1])
    with pytest.raises(DepthExhausted):
        drop_last_prime(p)


def test_crt_reconstruct_centered():
    big = PRIMES[0] * PRIMES[1] * PRIMES[2]
    vals = [0, 1, -1, big // 2, -(big // 2)] + [7] * (N - 5)
    p = RnsPolynomial.from_ints(vals, PRIMES)
    assert list(crt_reconstruct(p.coeffs, PRIMES)) == vals
    unc = crt_reconstruct(p.coeffs, PRIMES, centered=False)
    assert unc[2] == big - 1


def test_basis_rejects_duplicates():
    with pytest.raises(RingError):
        get_basis((PRIMES[0], PRIMES[0]), N)


def test_chain_layout():
    ch = ModulusChain.build(256, 4, 40, 60)
    assert ch.depth == 4 and len(ch.primes) == 6
    assert len(set(ch.primes)) == 6
    bits = [p.bit_length() for p in ch.primes]
    assert bits[0] == 60 and bits[-1] == 60 and set(bits[1:-1]) == {40}
    for p in ch.primes:
        assert p % 512 == 1
    assert ch.level_basis(0).primes == ch.data_primes[:1]
    assert ch.extended_basis(2).primes[-1] == ch.special_prime
    with pytest.raises(RingError):
        ch.level_basis(5)


def test_chain_equal_bit_sizes():
    ch = ModulusChain.build(256, 3, 50, 50)
    assert len(set(ch.primes)) == 5
