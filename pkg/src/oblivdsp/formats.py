"""On-disk formats: radar cubes, CKKS keys and ciphertexts.

All binary formats are little-endian and start with an 8-byte magic and a
``uint16`` version. Layouts are documented in ``docs/FORMATS.md``.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ckks import Ciphertext, CkksParams, KeySet, PublicKey, SecretKey, SwitchKey
from .ring import ModulusChain

CUBE_MAGIC = b"ODSPCUBE"
CKKS_MAGIC = b"ODSPCKKS"
VERSION = 1

_CUBE_HEAD = struct.Struct("<8sH4I2d")
_CKKS_HEAD = struct.Struct("<8sHB32s")
KIND_CIPHERTEXT, KIND_EVAL_KEYS, KIND_SECRET = 1, 2, 3


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# radar cubes
# ---------------------------------------------------------------------------


@dataclass
class RadarCube:
    """Complex samples indexed (frame, antenna, range bin, chirp)."""

    samples: np.ndarray
    frame_rate: float
    wavelength: float

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim != 4 or min(s.shape) < 1:
            raise FormatError(f"cube must be 4-D with positive sizes, got {s.shape}")
        if not np.all(np.isfinite(s)):
            raise FormatError("cube contains non-finite samples")
        self.samples = s.astype(np.complex128)

    @property
    def shape(self):
        return self.samples.shape


def cube_to_bytes(cube: RadarCube) -> bytes:
    f, a, r, d = cube.shape
    head = _CUBE_HEAD.pack(CUBE_MAGIC, VERSION, f, a, r, d, cube.frame_rate, cube.wavelength)
    body = np.empty(cube.samples.size * 2, dtype="<f8")
    body[0::2] = cube.samples.real.ravel()
    body[1::2] = cube.samples.imag.ravel()
    return head + body.tobytes()


def cube_from_bytes(data: bytes) -> RadarCube:
    if len(data) < _CUBE_HEAD.size:
        raise FormatError("truncated cube header")
    magic, ver, f, a, r, d, fs, lam = _CUBE_HEAD.unpack_from(data)
    if magic != CUBE_MAGIC:
        raise FormatError("not a cube file")
    if ver != VERSION:
        raise FormatError(f"unsupported cube version {ver}")
    count = f * a * r * d
    body = np.frombuffer(data, dtype="<f8", offset=_CUBE_HEAD.size)
    if body.size != 2 * count:
        raise FormatError("cube payload size does not match header")
    z = (body[0::2] + 1j * body[1::2]).reshape(f, a, r, d)
    return RadarCube(z, fs, lam)


def cube_from_csv(text: str) -> RadarCube:
    """CSV with columns frame,antenna,range_bin,chirp,re,im.

    Leading ``#`` lines may set ``frame_rate=``, ``wavelength=`` and
    ``shape=F,A,R,D``; otherwise the shape is inferred from the indices.
    """
    meta = {"frame_rate": "20.0", "wavelength": "0.005"}
    body = []
    for line in text.splitlines():
        if line.startswith("#"):
            for tok in line[1:].split():
                if "=" in tok:
                    k, v = tok.split("=", 1)
                    meta[k.strip()] = v.strip()
        elif line.strip():
            body.append(line)
    rows = list(csv.DictReader(io.StringIO("\n".join(body))))
    if not rows:
        raise FormatError("CSV cube has no samples")
    try:
        idx = np.array([[int(r[k]) for k in ("frame", "antenna", "range_bin", "chirp")] for r in rows])
        val = np.array([float(r["re"]) + 1j * float(r["im"]) for r in rows])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad CSV cube: {exc}") from exc
    if "shape" in meta:
        shape = tuple(int(x) for x in meta["shape"].split(","))
    else:
        shape = tuple(int(x) + 1 for x in idx.max(axis=0))
    z = np.zeros(shape, dtype=np.complex128)
    z[tuple(idx.T)] = val
    return RadarCube(z, float(meta["frame_rate"]), float(meta["wavelength"]))


def cube_to_csv(cube: RadarCube) -> str:
    f, a, r, d = cube.shape
    out = [f"# frame_rate={float(cube.frame_rate)!r} wavelength={float(cube.wavelength)!r} shape={f},{a},{r},{d}"]
    out.append("frame,antenna,range_bin,chirp,re,im")
    for i in np.ndindex(cube.shape):
        z = cube.samples[i]
        out.append(f"{i[0]},{i[1]},{i[2]},{i[3]},{float(z.real)!r},{float(z.imag)!r}")
    return "\n".join(out) + "\n"


def read_cube(path) -> RadarCube:
    p = Path(path)
    try:
        data = p.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {p}: {exc}") from exc
    if p.suffix.lower() == ".csv":
        return cube_from_csv(data.decode())
    return cube_from_bytes(data)


def write_cube(cube: RadarCube, path) -> None:
    p = Path(path)
    if p.suffix.lower() == ".csv":
        p.write_text(cube_to_csv(cube))
    else:
        p.write_bytes(cube_to_bytes(cube))


# ---------------------------------------------------------------------------
# CKKS objects
# ---------------------------------------------------------------------------


def params_to_dict(params: CkksParams) -> dict:
    ch = params.chain
    return {
        "n": ch.n,
        "depth": ch.depth,
        "scaling_bits": ch.scaling_bits,
        "edge_bits": ch.edge_bits,
        "sigma": params.sigma,
        "security": params.security,
        "digest": params.digest(),
    }


def params_from_dict(d: dict) -> CkksParams:
    chain = ModulusChain.build(int(d["n"]), int(d["depth"]), int(d["scaling_bits"]), int(d["edge_bits"]))
    params = CkksParams(chain, float(d["sigma"]), d["security"])
    if "digest" in d and d["digest"] != params.digest():
        raise FormatError("parameter digest mismatch")
    return params


def _head(kind: int, params: CkksParams) -> bytes:
    return _CKKS_HEAD.pack(CKKS_MAGIC, VERSION, kind, bytes.fromhex(params.digest()))


def _check_head(data: bytes, kind: int, params: CkksParams) -> int:
    if len(data) < _CKKS_HEAD.size:
        raise FormatError("truncated header")
    magic, ver, k, dig = _CKKS_HEAD.unpack_from(data)
    if magic != CKKS_MAGIC:
        raise FormatError("not a CKKS object")
    if ver != VERSION:
        raise FormatError(f"unsupported version {ver}")
    if k != kind:
        raise FormatError(f"expected object kind {kind}, found {k}")
    if dig.hex() != params.digest():
        raise FormatError("object was produced under different parameters")
    return _CKKS_HEAD.size


def _arr(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<u8").tobytes()


def ciphertext_to_bytes(ct: Ciphertext, params: CkksParams) -> bytes:
    meta = struct.pack("<HBdI", ct.level, ct.size, ct.scale, params.n)
    return _head(KIND_CIPHERTEXT, params) + meta + _arr(ct.polys)


def ciphertext_from_bytes(data: bytes, params: CkksParams) -> Ciphertext:
    off = _check_head(data, KIND_CIPHERTEXT, params)
    level, size, scale, n = struct.unpack_from("<HBdI", data, off)
    off += struct.calcsize("<HBdI")
    polys = np.frombuffer(data, dtype="<u8", offset=off).astype(np.uint64)
    if polys.size != size * (level + 1) * n:
        raise FormatError("ciphertext payload size mismatch")
    return Ciphertext(polys.reshape(size, level + 1, n), level, scale)


def _switch_key_bytes(k: SwitchKey) -> bytes:
    return _arr(k.b) + _arr(k.a)


def eval_keys_to_bytes(keys: KeySet) -> bytes:
    """Public key, relinearization key and Galois keys (no secret material)."""
    p = keys.params
    parts = [_head(KIND_EVAL_KEYS, p), struct.pack("<I", len(keys.galois))]
    parts += [_arr(keys.public.b), _arr(keys.public.a), _switch_key_bytes(keys.relin)]
    for rot in sorted(keys.galois):
        parts.append(struct.pack("<I", rot))
        parts.append(_switch_key_bytes(keys.galois[rot]))
    return b"".join(parts)


def secret_key_to_bytes(keys: KeySet) -> bytes:
    return _head(KIND_SECRET, keys.params) + np.asarray(keys.secret.coeffs, dtype=np.int8).tobytes()


def keyset_from_bytes(eval_data: bytes, secret_data: bytes | None, params: CkksParams) -> KeySet:
    off = _check_head(eval_data, KIND_EVAL_KEYS, params)
    (count,) = struct.unpack_from("<I", eval_data, off)
    off += 4
    n = params.n
    top = params.max_level + 1
    digits, ext = params.max_level + 1, params.max_level + 2

    def take(shape):
        nonlocal off
        size = int(np.prod(shape))
        arr = np.frombuffer(eval_data, dtype="<u8", count=size, offset=off).astype(np.uint64)
        off += size * 8
        return arr.reshape(shape)

    try:
        pk = PublicKey(take((top, n)), take((top, n)))
        relin = SwitchKey(take((digits, ext, n)), take((digits, ext, n)))
        galois = {}
        for _ in range(count):
            (rot,) = struct.unpack_from("<I", eval_data, off)
            off += 4
            galois[rot] = SwitchKey(take((digits, ext, n)), take((digits, ext, n)))
    except ValueError as exc:
        raise FormatError("truncated key file") from exc
    if secret_data is None:
        secret = SecretKey(np.zeros(0, dtype=np.int8))
    else:
        soff = _check_head(secret_data, KIND_SECRET, params)
        secret = SecretKey(np.frombuffer(secret_data, dtype=np.int8, offset=soff).copy())
        if secret.coeffs.size != n:
            raise FormatError("secret key size mismatch")
    return KeySet(params, secret, pk, relin, galois)


def save_keys(keys: KeySet, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "params.json").write_text(json.dumps(params_to_dict(keys.params), indent=2) + "\n")
    (d / "eval.keys").write_bytes(eval_keys_to_bytes(keys))
    (d / "secret.key").write_bytes(secret_key_to_bytes(keys))


def load_keys(directory, with_secret: bool = True) -> KeySet:
    d = Path(directory)
    try:
        params = params_from_dict(json.loads((d / "params.json").read_text()))
        eval_data = (d / "eval.keys").read_bytes()
        secret = (d / "secret.key").read_bytes() if with_secret else None
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise FileNotFoundError(f"key material missing or unreadable in {d}: {exc}") from exc
    return keyset_from_bytes(eval_data, secret, params)
