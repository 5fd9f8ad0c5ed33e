import numpy as np
import pytest

from oblivdsp.ckks import CkksClient, CkksEvaluator
from oblivdsp.formats import (
    FormatError,
    RadarCube,
    ciphertext_from_bytes,
    ciphertext_to_bytes,
    cube_from_bytes,
    cube_from_csv,
    cube_to_bytes,
    load_keys,
    params_from_dict,
    params_to_dict,
    read_cube,
    save_keys,
    write_cube,
)
from oblivdsp.ckks import CkksParams


@pytest.fixture
def cube(rng):
    z = rng.normal(size=(3, 2, 4, 5)) + 1j * rng.normal(size=(3, 2, 4, 5))
    return RadarCube(z, 33.0, 0.0039)


def test_cube_binary_roundtrip(cube):
    back = cube_from_bytes(cube_to_bytes(cube))
    assert np.array_equal(back.samples, cube.samples)
    assert (back.frame_rate, back.wavelength) == (33.0, 0.0039)


def test_cube_binary_layout(cube):
    data = cube_to_bytes(cube)
    assert data[:8] == b"ODSPCUBE"
    body = np.frombuffer(data[-cube.samples.size * 16 :], dtype="<f8")
    assert body[0] == cube.samples.real.flat[0] and body[1] == cube.samples.imag.flat[0]


def test_cube_binary_errors(cube):
    data = cube_to_bytes(cube)
    with pytest.raises(FormatError):
        cube_from_bytes(data[:10])
    with pytest.raises(FormatError):
        cube_from_bytes(b"XXXXXXXX" + data[8:])
    with pytest.raises(FormatError):
        cube_from_bytes(data[:-8])


def test_cube_file_roundtrip(tmp_path, cube):
    for name in ("c.bin", "c.csv"):
        write_cube(cube, tmp_path / name)
        back = read_cube(tmp_path / name)
        assert np.array_equal(back.samples, cube.samples)
        assert back.frame_rate == cube.frame_rate
    with pytest.raises(FormatError):
        read_cube(tmp_path / "missing.bin")


def test_csv_infers_shape():
    text = "frame,antenna,range_bin,chirp,re,im\n0,0,0,0,1,2\n1,0,2,0,3,-1\n"
    c = cube_from_csv(text)
    assert c.shape == (2, 1, 3, 1)
    assert c.samples[1, 0, 2, 0] == 3 - 1j
    assert c.frame_rate == 20.0


def test_csv_errors():
    with pytest.raises(FormatError):
        cube_from_csv("frame,antenna,range_bin,chirp,re,im\n")
    with pytest.raises(FormatError):
        cube_from_csv("frame,antenna\n0,0\n")


def test_cube_validation():
    with pytest.raises(FormatError):
        RadarCube(np.zeros((2, 2)), 20.0, 0.005)
    with pytest.raises(FormatError):
        RadarCube(np.full((1, 1, 1, 1), np.nan), 20.0, 0.005)


def test_params_roundtrip(small_params):
    assert params_from_dict(params_to_dict(small_params)) == small_params
    d = params_to_dict(small_params)
    d["digest"] = "0" * 64
    with pytest.raises(FormatError):
        params_from_dict(d)


def test_ciphertext_roundtrip(small_ckks, small_params, rng):
    client, ev = small_ckks
    v = rng.uniform(-1, 1, 16)
    ct = ev.rescale(ev.mul_plain(client.encrypt(v), np.ones(16)))
    back = ciphertext_from_bytes(ciphertext_to_bytes(ct, small_params), small_params)
    assert back.level == ct.level and back.scale == ct.scale
    assert np.array_equal(back.polys, ct.polys)
    other = CkksParams.desk(n=256, depth=3)
    with pytest.raises(FormatError):
        ciphertext_from_bytes(ciphertext_to_bytes(ct, small_params), other)


def test_keys_roundtrip(tmp_path, small_keys, small_params, rng):
    save_keys(small_keys, tmp_path)
    keys = load_keys(tmp_path)
    assert np.array_equal(keys.secret.coeffs, small_keys.secret.coeffs)
    assert set(keys.galois) == set(small_keys.galois)
    v = rng.uniform(-1, 1, 8)
    client = CkksClient(keys, seed=1)
    ev = CkksEvaluator(small_params, load_keys(tmp_path, with_secret=False).evaluation_keys())
    out = client.decrypt(ev.rotate(client.encrypt(v), 1), 8)
    assert np.abs(out[:7] - v[1:]).max() < 1e-6


def test_missing_keys(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_keys(tmp_path)
