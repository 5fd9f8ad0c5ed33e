"""Depth-bounded radar DSP kernels over the slot VM.

Every kernel is a fixed arithmetic circuit: its operation sequence depends on
the public configuration only, never on slot values. Plaintext operands
(DFT matrices, filter taps, masks, FC weights) are public.
"""

from __future__ import annotations

import functools
import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .vm import SlotVector, SlotVM, plain_digest


def _log2_exact(x: int, name: str) -> int:
    if x < 1 or x & (x - 1):
        raise ValueError(f"{name} must be a power of two >= 1, got {x}")
    return x.bit_length() - 1


def _slots(values, n: int) -> np.ndarray:
    out = np.zeros(n)
    v = np.asarray(values, dtype=np.float64).ravel()
    out[: v.size] = v
    return out


# ---------------------------------------------------------------------------
# public operands
# ---------------------------------------------------------------------------


@dataclass
class PlainOperand:
    """A public vector or matrix with a role tag and a scale factor."""

    values: np.ndarray
    role: str
    scale: float = 1.0

    @property
    def scaled(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64) * self.scale

    def to_text(self) -> str:
        v = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        lines = [
            "# oblivdsp plain operand v1",
            f"role = {self.role}",
            f"dims = {v.shape[0]} {v.shape[1]}",
            f"scale = {self.scale!r}",
        ]
        lines += [" ".join(repr(float(x)) for x in row) for row in v]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> list["PlainOperand"]:
        """Parse one or more operands; blocks start with a ``role =`` line."""
        out: list[PlainOperand] = []
        head: dict = {}
        rows: list = []

        def flush():
            if not head:
                return
            dims = tuple(int(x) for x in head["dims"].split())
            arr = np.array(rows, dtype=np.float64).reshape(dims)
            if dims[0] == 1:
                arr = arr[0]
            out.append(cls(arr, head["role"], float(head.get("scale", 1.0))))

        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" in line:
                key, val = (s.strip() for s in line.split("=", 1))
                if key == "role":
                    flush()
                    head, rows = {}, []
                head[key] = val
            else:
                rows.append([float(x) for x in line.split()])
        flush()
        if not out:
            raise ValueError("no operand found")
        return out


# ---------------------------------------------------------------------------
# rotation-and-add reductions
# ---------------------------------------------------------------------------


def window_sum(vm: SlotVM, x: SlotVector, width: int) -> SlotVector:
    """Slot j receives ``sum(x[j : j+width])`` (cyclic); width a power of two."""
    steps = _log2_exact(width, "window width")
    for j in range(steps):
        x = vm.add(x, vm.rotate(x, 1 << j))
    return x


def broadcast_sum(vm: SlotVM, x: SlotVector) -> SlotVector:
    """Every slot receives the sum of all slots."""
    return vm.relabel(window_sum(vm, x, vm.slot_count), vm.slot_count)


def block_broadcast_sum(vm: SlotVM, x: SlotVector, period: int) -> SlotVector:
    """Slot j receives the sum over all slots congruent to j mod ``period``."""
    n = vm.slot_count
    if n % period:
        raise ValueError(f"period {period} does not divide {n} slots")
    for j in range(_log2_exact(n // period, "block count")):
        x = vm.add(x, vm.rotate(x, period << j))
    return x


# ---------------------------------------------------------------------------
# generalized-diagonal BSGS matvec
# ---------------------------------------------------------------------------


def diagonals(mat, n: int) -> dict:
    """Nonzero cyclic diagonals ``d_i[j] = M[j, (j+i) mod n]`` keyed by signed offset."""
    m = sp.coo_array(mat)
    keep = m.data != 0
    rows, cols, vals = m.row[keep], m.col[keep], m.data[keep]
    if rows.size and (rows.max() >= n or cols.max() >= n):
        raise ValueError(f"matrix does not fit in {n} slots")
    off = (cols.astype(np.int64) - rows) % n
    off = np.where(off > n // 2, off - n, off)
    out = {}
    order = np.argsort(off, kind="stable")
    off, rows, vals = off[order], rows[order], vals[order]
    starts = np.flatnonzero(np.r_[True, off[1:] != off[:-1]]) if off.size else []
    bounds = list(starts) + [off.size]
    for a, b in zip(bounds[:-1], bounds[1:]):
        d = np.zeros(n)
        d[rows[a:b]] = vals[a:b]
        out[int(off[a])] = d
    return out


def bsgs_plan(offsets) -> tuple:
    """Baby-step size and the (giant, baby) split of each offset."""
    offsets = sorted(offsets)
    b = max(1, math.ceil(math.sqrt(len(offsets)))) if offsets else 1
    split = {i: (i // b, i - (i // b) * b) for i in offsets}
    return b, split


@dataclass
class MatvecPlan:
    """Precomputed BSGS schedule: rotated diagonals and their digests."""

    n: int
    baby_step: int
    babies: dict  # input index -> sorted baby shifts
    outputs: list  # per output: list of (giant, [(input, baby, values, digest)])
    n_diagonals: int

    def rotation_count(self) -> int:
        giants = sum(1 for out in self.outputs for g, _ in out if g != 0)
        return giants + sum(1 for v in self.babies.values() for s in v if s != 0)


def plan_matvec(blocks, n: int) -> MatvecPlan:
    """Schedule ``y_o = sum_i M[o][i] @ x_i``; ``blocks[o][i]`` is an n x n matrix or None."""
    diag = {}
    for o, row in enumerate(blocks):
        for i, m in enumerate(row):
            if m is not None:
                diag[o, i] = diagonals(m, n)
    offsets = set()
    for d in diag.values():
        offsets.update(d)
    b, split = bsgs_plan(offsets)
    n_inputs = max((len(row) for row in blocks), default=0)
    babies = {
        i: sorted({split[k][1] for (o, ii), d in diag.items() if ii == i for k in d})
        for i in range(n_inputs)
    }
    outputs = []
    for o in range(len(blocks)):
        groups = defaultdict(list)
        for i in range(n_inputs):
            for k, d in sorted(diag.get((o, i), {}).items()):
                g, s = split[k]
                pt = np.roll(d, g * b)
                groups[g].append((i, s, pt, plain_digest(pt)))
        outputs.append(sorted(groups.items(), key=lambda kv: kv[0]))
    return MatvecPlan(n, b, babies, outputs, len(offsets))


def run_matvec(vm: SlotVM, xs, plan: MatvecPlan, out_lengths) -> list:
    """Evaluate a planned matvec. Depth 1."""
    if plan.n != vm.slot_count:
        raise ValueError("plan was built for a different slot count")
    babies = {i: dict(zip(shifts, vm.rotate_many(xs[i], shifts))) for i, shifts in plan.babies.items()}
    outs = []
    for groups, length in zip(plan.outputs, out_lengths):
        if not groups:
            outs.append(vm.mul_plain(xs[0], np.zeros(plan.n), length=length))
            continue
        parts = []
        for g, terms in groups:
            inner = vm.dot_plain([(babies[i][s], pt, dg) for i, s, pt, dg in terms])
            parts.append(vm.rotate(inner, g * plan.baby_step))
        outs.append(vm.relabel(vm.add_many(parts), length))
    return outs


def bsgs_matvec(vm: SlotVM, xs, blocks, out_lengths) -> list:
    """Generalized-diagonal matvec with shared baby steps and per-output giant steps."""
    return run_matvec(vm, xs, plan_matvec(blocks, vm.slot_count), out_lengths)


def placed(mat, n: int, row0: int = 0, col0: int = 0):
    """Embed a small dense matrix into an ``n x n`` sparse operator."""
    m = sp.coo_array(np.asarray(mat, dtype=np.float64))
    if row0 + m.shape[0] > n or col0 + m.shape[1] > n:
        raise ValueError("matrix does not fit in the slot vector")
    return sp.coo_array((m.data, (m.row + row0, m.col + col0)), shape=(n, n))


# ---------------------------------------------------------------------------
# K1 energy
# ---------------------------------------------------------------------------


def frame_power(vm: SlotVM, re: SlotVector, im: SlotVector) -> SlotVector:
    return vm.add(vm.square(re), vm.square(im))


def k1_energy(vm: SlotVM, re_frames, im_frames, return_powers: bool = False):
    """Per-slot energy summed over frames. Depth 1."""
    if len(re_frames) != len(im_frames) or not re_frames:
        raise ValueError("frame count mismatch")
    powers = [frame_power(vm, r, i) for r, i in zip(re_frames, im_frames)]
    energy = vm.add_many(powers)
    return (energy, powers) if return_powers else energy


# ---------------------------------------------------------------------------
# K2 soft attention
# ---------------------------------------------------------------------------


def power_by_squaring(vm: SlotVM, x: SlotVector, exponent: int) -> SlotVector:
    for _ in range(_log2_exact(exponent, "exponent")):
        x = vm.square(x)
    return x


def k2_soft_attention(vm: SlotVM, energy: SlotVector, gamma: int):
    """Returns ``(N, Dn, w)`` with ``w = E**gamma``; N and Dn sit in slot 0.

    Depth ``log2(gamma) + 1`` (N carries the ramp multiply; Dn does not).
    """
    length = energy.length
    w = power_by_squaring(vm, energy, gamma)
    width = 1 << max(0, (length - 1).bit_length())
    dn = vm.relabel(window_sum(vm, w, width), 1)
    ramp = _slots(np.arange(length, dtype=np.float64), vm.slot_count)
    num = vm.relabel(window_sum(vm, vm.mul_plain(w, ramp), width), 1)
    return num, dn, w


def k2_doppler_soft_power(vm: SlotVM, power: SlotVector, a: int, r: int, d: int, gamma: int = 4):
    """Weight every cell by its Doppler column's total power raised to gamma.

    Returns ``(features, column_weights)``. Depth ``log2(gamma) + 1``.
    """
    if power.length != a * r * d or a * r * d > vm.slot_count:
        raise ValueError("layout mismatch for interleaved range-Doppler packing")
    col = block_broadcast_sum(vm, power, d)
    weights = power_by_squaring(vm, col, gamma)
    feats = vm.relabel(vm.mul(power, weights), a * r * d)
    return feats, weights


# ---------------------------------------------------------------------------
# K3 windowed, shifted Doppler DFT
# ---------------------------------------------------------------------------


def doppler_dft_matrices(d: int, scale: float = 1.0):
    """Real and imaginary parts of ``fftshift(fft(hanning(d) * x))`` as matrices."""
    w = np.hanning(d)
    k = (np.arange(d)[:, None] + d // 2) % d
    t = np.arange(d)[None, :]
    ang = 2 * np.pi * k * t / d
    return scale * w * np.cos(ang), -scale * w * np.sin(ang)


@functools.lru_cache(maxsize=32)
def dft_plan(a: int, r: int, d: int, n: int, scale: float = 1.0) -> MatvecPlan:
    span = a * r * d
    if span > n:
        raise ValueError("interleaved layout exceeds slot count")
    c, s = doppler_dft_matrices(d, scale)
    eye = sp.identity(a * r, format="coo")

    def embed(block):
        m = sp.coo_array(sp.kron(eye, block))
        return sp.coo_array((m.data, (m.row, m.col)), shape=(n, n))

    big_c, big_s = embed(c), embed(s)
    return plan_matvec([[big_c, -big_s], [big_s, big_c]], n)


def k3_dft(vm: SlotVM, re: SlotVector, im: SlotVector, a: int, r: int, d: int, scale: float = 1.0):
    """Blockwise windowed DFT in the interleaved layout. Depth 1."""
    span = a * r * d
    plan = dft_plan(a, r, d, vm.slot_count, float(scale))
    return tuple(run_matvec(vm, [re, im], plan, [span, span]))


# ---------------------------------------------------------------------------
# K4 soft I/Q extraction
# ---------------------------------------------------------------------------


def k4_soft_iq(vm: SlotVM, re_frames, im_frames, p_phi: int = 2, powers=None):
    """Mask-weighted I/Q per frame, broadcast to every slot.

    Returns two lists of SlotVectors (one per frame). Depth ``log2(p_phi) + 2``.
    """
    if len(re_frames) != len(im_frames):
        raise ValueError("frame count mismatch")
    if powers is None:
        powers = [frame_power(vm, r, i) for r, i in zip(re_frames, im_frames)]
    i_out, q_out = [], []
    for re, im, p in zip(re_frames, im_frames, powers):
        m = power_by_squaring(vm, p, p_phi)
        i_out.append(broadcast_sum(vm, vm.mul(m, re)))
        q_out.append(broadcast_sum(vm, vm.mul(m, im)))
    return i_out, q_out


def iq_offsets(n: int, r: int) -> tuple:
    """Where :func:`k4_soft_iq_paired` leaves exact I and Q totals:
    I fills slots ``[n/2 + r, n)``, Q fills ``[r, n/2]``."""
    return n // 2 + r, r


def k4_soft_iq_paired(vm: SlotVM, re_frames, im_frames, p_phi: int = 2, powers=None) -> list:
    """Mask-weighted I and Q of each frame, both broadcast into one vector.

    Q is moved to the upper half of the ring, then one half-ring window sum
    leaves the I total in slots ``[n/2 + R, n)`` and the Q total in
    ``[R, n/2]`` (see :func:`iq_offsets`); other slots hold partial sums.
    One rotation plus ``log2(n) - 1`` per frame instead of ``2 log2(n)``.
    Depth ``log2(p_phi) + 2``.
    """
    if len(re_frames) != len(im_frames):
        raise ValueError("frame count mismatch")
    n = vm.slot_count
    r = re_frames[0].length
    if r > n // 4:
        raise ValueError("paired I/Q layout needs R <= n/4")
    if powers is None:
        powers = [frame_power(vm, a, b) for a, b in zip(re_frames, im_frames)]
    out = []
    for re, im, p in zip(re_frames, im_frames, powers):
        m = power_by_squaring(vm, p, p_phi)
        both = vm.add(vm.mul(m, re), vm.rotate(vm.mul(m, im), n // 2))
        out.append(vm.relabel(window_sum(vm, both, n // 2), n))
    return out


def pack_series(vm: SlotVM, series) -> SlotVector:
    """Pack broadcast per-frame scalars into slots ``0..F-1``. Depth 1."""
    n = vm.slot_count
    terms = []
    for t, x in enumerate(series):
        e = np.zeros(n)
        e[t] = 1.0
        terms.append((x, e))
    return vm.dot_plain(terms, len(series))


# ---------------------------------------------------------------------------
# K5 FIR
# ---------------------------------------------------------------------------


def toeplitz_matrix(taps, length: int) -> np.ndarray:
    """Causal convolution ``y[t] = sum_k h[k] x[t-k]`` truncated to ``length``."""
    h = np.asarray(taps, dtype=np.float64)
    t = np.zeros((length, length))
    for k, hk in enumerate(h):
        idx = np.arange(k, length)
        t[idx, idx - k] = hk
    return t


def _check_taps(taps, length):
    if len(taps) > length:
        raise ValueError(f"{len(taps)} taps exceed signal length {length}")


def k5_fir(vm: SlotVM, x: SlotVector, taps, method: str = "toeplitz") -> SlotVector:
    """Filter a packed length-F vector. Depth 1."""
    f = x.length
    _check_taps(taps, f)
    n = vm.slot_count
    if method == "toeplitz":
        mat = placed(toeplitz_matrix(taps, f), n)
        return bsgs_matvec(vm, [x], [[mat]], [f])[0]
    if method == "rotation":
        h = np.asarray(taps, dtype=np.float64)
        shifted = vm.rotate_many(x, [-k for k in range(h.size)])
        terms = []
        for k, hk in enumerate(h):
            mask = np.zeros(n)
            mask[k:f] = hk
            terms.append((shifted[k], mask))
        return vm.dot_plain(terms, f)
    raise ValueError(f"unknown FIR method {method!r}")


def k5_fir_series(vm: SlotVM, series, taps) -> SlotVector:
    """Filter broadcast per-frame scalars, packing the output into slots ``0..F-1``.

    Uses Toeplitz columns as plaintext operands, so no rotations. Depth 1.
    """
    f = len(series)
    _check_taps(taps, f)
    t = toeplitz_matrix(taps, f)
    n = vm.slot_count
    return vm.dot_plain([(x, _slots(t[:, j], n)) for j, x in enumerate(series)], f)


def k5_fir_paired(vm: SlotVM, paired, taps, r: int):
    """Filter the I and Q series held by :func:`k4_soft_iq_paired` outputs.

    Each Toeplitz column is placed at both the I and the Q offset, so one
    plaintext product per frame filters both; two rotations then bring the
    filtered I and Q to slots ``0..F-1``. Slots beyond ``F-1`` are not
    cleared. Depth 1.
    """
    f = len(paired)
    _check_taps(taps, f)
    n = vm.slot_count
    off_i, off_q = iq_offsets(n, r)
    if off_i + f > n or off_q + f > n // 2 + 1:
        raise ValueError(f"{f} frames do not fit the paired layout with R={r}")
    t = toeplitz_matrix(taps, f)
    terms = []
    for j, x in enumerate(paired):
        col = np.zeros(n)
        col[off_i : off_i + f] = t[:, j]
        col[off_q : off_q + f] = t[:, j]
        terms.append((x, col))
    y = vm.dot_plain(terms, n)
    return vm.relabel(vm.rotate(y, off_i), f), vm.relabel(vm.rotate(y, off_q), f)


# ---------------------------------------------------------------------------
# K6 notch
# ---------------------------------------------------------------------------


def notch_mask(a: int, r: int, d: int, width: int = 1) -> np.ndarray:
    """0/1 mask zeroing Doppler bins within ``width - 1`` of bin d/2 in every block."""
    if width < 1:
        raise ValueError("notch width must be >= 1")
    m = np.ones(d)
    centre = d // 2
    m[max(0, centre - width + 1) : min(d, centre + width)] = 0.0
    return np.tile(m, a * r)


def k6_notch(vm: SlotVM, spec: SlotVector, a: int, r: int, d: int, width: int = 1) -> SlotVector:
    """Zero the near-zero-Doppler bins. Depth 1."""
    if spec.length != a * r * d:
        raise ValueError("layout mismatch for notch mask")
    return vm.mul_plain(spec, _slots(notch_mask(a, r, d, width), vm.slot_count))


# ---------------------------------------------------------------------------
# K7 differential phase
# ---------------------------------------------------------------------------


def taylor_phase_plain(y, x, order: int = 3, form: str = "full"):
    """Plain evaluation of the phase-step polynomial (used by oracles and tests)."""
    y = np.asarray(y, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if order == 1:
        return y
    if order != 3:
        raise ValueError("Taylor order must be 1 or 3")
    if form == "full":
        return y * (x * x - 3 * x + 3) - y**3 / 3
    if form == "odd":
        return y * x * x - y**3 / 3
    raise ValueError(f"unknown form {form!r}")


def k7_taylor_phase(vm: SlotVM, i_f: SlotVector, q_f: SlotVector, order: int = 3, form: str = "full"):
    """Phase steps between consecutive samples; slot t holds the step t -> t+1.

    ``y = Im(w[t+1] conj(w[t]))`` and ``x = Re(...)`` cost one level. Order 3
    adds two more levels; order 1 returns ``y``. ``form="full"`` is the
    complete third-order expansion of ``atan2(y, x)`` about ``(1, 0)``,
    ``y(3 - 3x + x^2) - y^3/3``; ``form="odd"`` drops the terms in ``x - 1``.
    """
    f = i_f.length
    if q_f.length != f:
        raise ValueError("I and Q lengths differ")
    n = vm.slot_count
    i_next = vm.rotate(i_f, 1)
    q_next = vm.rotate(q_f, 1)
    y = vm.sub(vm.mul(q_next, i_f), vm.mul(i_next, q_f))
    x = vm.add(vm.mul(i_next, i_f), vm.mul(q_next, q_f))
    y, x = vm.relabel(y, f - 1), vm.relabel(x, f - 1)
    if order == 1:
        return y
    if order != 3:
        raise ValueError("Taylor order must be 1 or 3")
    mask = _slots(np.ones(f - 1), n)
    x2 = vm.square(x)
    if form == "full":
        poly = vm.add(x2, vm.mul_plain(x, -3.0 * mask))
        poly = vm.add_plain(poly, 3.0 * mask)
    elif form == "odd":
        poly = x2
    else:
        raise ValueError(f"unknown form {form!r}")
    cube = vm.mul(vm.square(y), vm.mul_plain(y, mask / 3.0))
    return vm.sub(vm.mul(y, poly), cube)


# ---------------------------------------------------------------------------
# FC inference
# ---------------------------------------------------------------------------


def fc_plans(layers, n: int) -> list:
    plans = []
    for idx, (w, b) in enumerate(layers):
        w = np.asarray(w, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] > n or w.shape[1] > n:
            raise ValueError(f"layer {idx}: weight shape {w.shape} does not fit {n} slots")
        plans.append(plan_matvec([[placed(w, n)]], n))
    return plans


def fc_forward(vm: SlotVM, h0: SlotVector, layers, plans=None, return_hidden: bool = False):
    """Square-activated MLP; ``layers`` is a list of ``(W, b)``. Depth ``2L - 1``."""
    n = vm.slot_count
    plans = plans if plans is not None else fc_plans(layers, n)
    h = h0
    hidden = []
    for idx, ((w, b), plan) in enumerate(zip(layers, plans)):
        w = np.asarray(w, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if w.shape[1] != h.length or b.shape != (w.shape[0],):
            raise ValueError(f"layer {idx}: weight shape {w.shape} does not fit input {h.length}")
        h = run_matvec(vm, [h], plan, [w.shape[0]])[0]
        h = vm.add_plain(h, _slots(b, n))
        if idx < len(layers) - 1:
            h = vm.square(h)
        hidden.append(h)
    return (h, hidden) if return_hidden else h


# ---------------------------------------------------------------------------
# declared depths
# ---------------------------------------------------------------------------


def declared_depths(gamma_vital=2, gamma_gesture=4, p_phi=2, taylor_order=3, fc_layers=3) -> dict:
    return {
        "K1": 1,
        "K2": _log2_exact(gamma_vital, "gamma") + 1,
        "K2g": _log2_exact(gamma_gesture, "gamma") + 1,
        "K3": 1,
        "K4": _log2_exact(p_phi, "P_phi") + 2,
        "K5": 1,
        "K6": 1,
        "K7": 3 if taylor_order == 3 else 1,
        "FC": 2 * fc_layers - 1,
    }
