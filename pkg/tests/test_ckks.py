import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oblivdsp.ckks import (
    INSECURE_TAG,
    CkksClient,
    CkksError,
    CkksEvaluator,
    CkksParams,
    EncodingOverflow,
    MissingGaloisKey,
    ScaleMismatch,
    get_encoder,
    keygen,
)
from oblivdsp.ring import DepthExhausted

TOL = 1e-6


def vec(rng, n, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, n)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=128))
def test_embedding_roundtrip(values):
    enc = get_encoder(256)
    back = enc.embed(enc.embed_inverse(values)).real[: len(values)]
    assert np.allclose(back, values, atol=1e-9)


def test_rotation_by_x5():
    # X -> X^5 on coefficients is a left rotation of slots
    enc = get_encoder(64)
    v = np.arange(32.0)
    c = enc.embed_inverse(v)
    rotated = np.zeros(64)
    for i, ci in enumerate(c):
        k = (5 * i) % 128
        if k < 64:
            rotated[k] += ci
        else:
            rotated[k - 64] -= ci
    assert np.allclose(enc.embed(rotated).real, np.roll(v, -1), atol=1e-9)


def test_encrypt_decrypt(small_ckks, rng):
    client, _ = small_ckks
    v = vec(rng, client.slot_count)
    assert np.abs(client.decrypt(client.encrypt(v)) - v).max() < 2**-20


def test_encrypt_at_lower_level(small_ckks, rng):
    client, _ = small_ckks
    v = vec(rng, 10)
    ct = client.encrypt(v, level=1)
    assert ct.level == 1
    assert np.abs(client.decrypt(ct, 10) - v).max() < TOL


def test_additive_ops(small_ckks, rng):
    client, ev = small_ckks
    a, b = vec(rng, 128), vec(rng, 128)
    ca, cb = client.encrypt(a), client.encrypt(b)
    assert np.abs(client.decrypt(ev.add(ca, cb)) - (a + b)).max() < TOL
    assert np.abs(client.decrypt(ev.sub(ca, cb)) - (a - b)).max() < TOL
    assert np.abs(client.decrypt(ev.negate(ca)) + a).max() < TOL
    assert np.abs(client.decrypt(ev.add_plain(ca, b)) - (a + b)).max() < TOL


def test_mul_and_rescale(small_ckks, rng):
    client, ev = small_ckks
    a, b = vec(rng, 128), vec(rng, 128)
    ca, cb = client.encrypt(a), client.encrypt(b)
    prod = ev.rescale(ev.mul(ca, cb))
    assert prod.level == ca.level - 1
    assert prod.scale == pytest.approx(ev.scale_at(prod.level), rel=1e-12)
    assert np.abs(client.decrypt(prod) - a * b).max() < TOL
    pp = ev.rescale(ev.mul_plain(ca, b))
    assert np.abs(client.decrypt(pp) - a * b).max() < TOL


def test_unrelinearized_product_decrypts(small_ckks, rng):
    client, ev = small_ckks
    a = vec(rng, 128)
    ca = client.encrypt(a)
    c3 = ev.mul(ca, ca, relin=False)
    assert c3.size == 3
    assert np.abs(client.decrypt(ev.rescale(c3)) - a * a).max() < TOL
    assert np.abs(client.decrypt(ev.rescale(ev.relinearize(c3))) - a * a).max() < TOL


def test_mul_int(small_ckks, rng):
    client, ev = small_ckks
    a = vec(rng, 128)
    ct = ev.mul_int(client.encrypt(a), 7)
    assert np.abs(client.decrypt(ct) - a).max() < TOL  # scale absorbs the factor
    assert ct.scale == pytest.approx(7 * ev.scale_at(ct.level))


@pytest.mark.parametrize("k", [1, 2, 5, 64, -1])
def test_rotate(small_ckks, rng, k):
    client, ev = small_ckks
    a = vec(rng, client.slot_count)
    out = client.decrypt(ev.rotate(client.encrypt(a), k))
    assert np.abs(out - np.roll(a, -k)).max() < TOL


def test_rotate_many_matches_single(small_ckks, rng):
    client, ev = small_ckks
    a = vec(rng, client.slot_count)
    ct = client.encrypt(a)
    outs = ev.rotate_many(ct, [1, 0, 5, 2])
    assert outs[1] is ct
    for k, o in zip([1, 0, 5, 2], outs):
        assert np.abs(client.decrypt(o) - np.roll(a, -k)).max() < TOL


def test_rotate_zero_is_identity(small_ckks, rng):
    client, ev = small_ckks
    ct = client.encrypt(vec(rng, 4))
    assert ev.rotate(ct, 0) is ct
    assert ev.rotate(ct, client.slot_count) is ct


def test_missing_galois_key(small_ckks, rng):
    client, ev = small_ckks
    with pytest.raises(MissingGaloisKey):
        ev.rotate(client.encrypt(vec(rng, 4)), 3)


def test_rescale_at_bottom_fails(small_ckks, rng):
    client, ev = small_ckks
    ct = client.encrypt(vec(rng, 4), level=0)
    with pytest.raises(DepthExhausted):
        ev.rescale(ev.mul(ct, ct))


def test_level_and_scale_mismatch(small_ckks, rng):
    client, ev = small_ckks
    a = client.encrypt(vec(rng, 4))
    b = client.encrypt(vec(rng, 4), level=2)
    with pytest.raises(CkksError):
        ev.add(a, b)
    with pytest.raises(ScaleMismatch):
        ev.add(a, ev.mul_int(a, 3))


def test_drop_to_keeps_value(small_ckks, rng):
    client, ev = small_ckks
    v = vec(rng, 16)
    ct = ev.drop_to(client.encrypt(v), 1)
    assert ct.level == 1
    assert np.abs(client.decrypt(ct, 16) - v).max() < TOL
    with pytest.raises(CkksError):
        ev.drop_to(ct, 2)


def test_encoding_overflow(small_ckks):
    client, _ = small_ckks
    with pytest.raises(EncodingOverflow):
        client.encrypt([1e80])
    with pytest.raises(EncodingOverflow):
        client.encrypt([np.nan])


def test_too_many_values(small_ckks):
    client, _ = small_ckks
    with pytest.raises(CkksError):
        client.encrypt(np.zeros(client.slot_count + 1))


def test_keys_bound_to_params(small_params, small_keys):
    other = CkksParams.desk(n=256, depth=3)
    with pytest.raises(CkksError):
        CkksEvaluator(other, small_keys.evaluation_keys())


def test_evaluator_holds_no_secret(small_params, small_keys):
    ek = small_keys.evaluation_keys()
    ev = CkksEvaluator(small_params, ek)
    assert not hasattr(ek, "secret")
    assert not any("secret" in name for name in vars(ev))
    assert not hasattr(ev, "decrypt")


def test_keygen_is_seeded(small_params):
    k1 = keygen(small_params, [1], seed=5)
    k2 = keygen(small_params, [1], seed=5)
    assert np.array_equal(k1.secret.coeffs, k2.secret.coeffs)
    assert np.array_equal(k1.galois[1].b, k2.galois[1].b)
    assert set(np.unique(k1.secret.coeffs)) <= {-1, 0, 1}


def test_scales_follow_chain(small_params):
    p = small_params
    s = p.scales
    assert s[p.max_level] == 2.0**40
    for lvl in range(p.max_level, 0, -1):
        assert s[lvl - 1] == pytest.approx(s[lvl] ** 2 / p.chain.data_primes[lvl], rel=1e-15)
        assert abs(np.log2(s[lvl - 1]) - 40) < 0.01


def test_profiles():
    p = CkksParams.desk(n=256, depth=2)
    assert p.tag == INSECURE_TAG
    assert p.slot_count == 128
    with pytest.raises(CkksError):
        CkksParams(p.chain, security="standard128")
    with pytest.raises(CkksError):
        CkksParams(p.chain, security="bogus")


def test_digest_tracks_params():
    a = CkksParams.desk(n=256, depth=2)
    b = CkksParams.desk(n=256, depth=3)
    assert a.digest() == CkksParams.desk(n=256, depth=2).digest()
    assert a.digest() != b.digest()


def test_plain_cache_reuses_encoding(small_ckks, rng):
    _, ev = small_ckks
    v = vec(rng, 8)
    m1 = ev.encode_plain(v, ev.scale_at(3), 3)
    m2 = ev.encode_plain(v.copy(), ev.scale_at(3), 3)
    assert m1 is m2
    assert ev.encode_plain(v, ev.scale_at(2), 2) is not m1


def test_client_without_rotation_keys_decrypts(small_params):
    keys = keygen(small_params, (), seed=1)
    client = CkksClient(keys, seed=2)
    assert np.allclose(client.decrypt(client.encrypt([0.5, -0.25]), 2), [0.5, -0.25], atol=TOL)
