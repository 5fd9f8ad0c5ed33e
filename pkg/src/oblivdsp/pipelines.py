"""End-to-end protocols: client preprocessing and packing, the two cloud-side
kernel compositions, and client-side recovery.

The client functions (``client_*``, ``encrypt_*``, ``recover_*``) hold the
decryptor. The cloud functions (``vitals_circuit``, ``gesture_circuit``) only
ever see a :class:`~oblivdsp.vm.SlotVM`, whose backend has no secret key.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from . import kernels as K
from .ckks import CkksParams
from .config import Config, GestureConfig, VitalsConfig
from .formats import RadarCube
from .vm import (
    Session,
    SlotVM,
    SlotVector,
    TraceRecord,
    ckks_session,
    exactsim_session,
    levelsim_session,
)

logger = logging.getLogger(__name__)


class CapacityError(ValueError):
    """The packed layout does not fit in the slot vector."""


# ---------------------------------------------------------------------------
# depth ledger
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LedgerRow:
    stage: str
    depth: int
    cumulative: int
    operation: str

    def line(self) -> str:
        return f"{self.stage:<20} {self.depth:>5d} {self.cumulative:>5d}  {self.operation}"


LEDGER_HEADER = f"{'Stage':<20} {'Depth':>5} {'Sum':>5}  Operation"


def format_ledger(rows) -> str:
    return "\n".join([LEDGER_HEADER] + [r.line() for r in rows])


class _Ledger:
    """Records the consumed depth of each stage's principal output."""

    def __init__(self, vm: SlotVM):
        self.top = vm.max_level
        self.rows: list[LedgerRow] = []

    def mark(self, stage: str, operation: str, out: SlotVector) -> None:
        cum = self.top - out.level
        prev = self.rows[-1].cumulative if self.rows else 0
        self.rows.append(LedgerRow(stage, cum - prev, cum, operation))


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=list).encode()).hexdigest()


# ---------------------------------------------------------------------------
# client: preprocessing and packing
# ---------------------------------------------------------------------------


def _safe_max(x: np.ndarray, axis=None, keepdims=False):
    m = np.max(np.abs(x), axis=axis, keepdims=keepdims)
    return np.where(m > 0, m, 1.0)


def _remove_clutter(z: np.ndarray) -> np.ndarray:
    """Subtract the per-cell mean over frames; rounding residue of a static
    scene is cleared so that it is not normalized up to unit magnitude."""
    out = z - z.mean(axis=0, keepdims=True)
    floor = 1e-12 * float(np.max(np.abs(z), initial=0.0))
    out[np.abs(out) <= floor] = 0.0
    return out


def client_preprocess(cube: RadarCube, mode: str = "vital", antenna: int = 0) -> np.ndarray:
    """Clutter removal and normalization.

    ``vital``: one antenna, chirps averaged, complex ``(F, R)``; every frame
    scaled by its own peak magnitude. ``gesture``: full ``(F, A, R, D)``
    scaled by one global peak. Zero windows keep a unit scale.
    """
    z = cube.samples
    if mode == "vital":
        if not 0 <= antenna < z.shape[1]:
            raise ValueError(f"antenna {antenna} outside 0..{z.shape[1] - 1}")
        z = _remove_clutter(z[:, antenna, :, :].mean(axis=-1))
        return z / _safe_max(z, axis=1, keepdims=True)
    if mode == "gesture":
        z = _remove_clutter(z)
        return z / _safe_max(z)
    raise ValueError(f"unknown preprocessing mode {mode!r}")


def pack_vital(frames: np.ndarray, slot_count: int):
    """Range bins go into the first R slots; returns ``(re, im)`` of shape (F, R)."""
    frames = np.asarray(frames)
    if frames.ndim != 2:
        raise ValueError("vital frames must be (F, R)")
    if frames.shape[1] > slot_count:
        raise CapacityError(f"{frames.shape[1]} range bins exceed {slot_count} slots")
    return frames.real.copy(), frames.imag.copy()


def unpack_vital(re: np.ndarray, im: np.ndarray, range_bins: int) -> np.ndarray:
    return np.asarray(re)[:, :range_bins] + 1j * np.asarray(im)[:, :range_bins]


def pack_doppler(frames: np.ndarray, slot_count: int):
    """Interleaved layout ``slot[a*R*D + r*D + d]``; returns ``(re, im)`` of shape (F, A*R*D)."""
    frames = np.asarray(frames)
    if frames.ndim != 4:
        raise ValueError("Doppler frames must be (F, A, R, D)")
    f, a, r, d = frames.shape
    if a * r * d > slot_count:
        raise CapacityError(f"{a * r * d} active slots exceed {slot_count}")
    flat = frames.reshape(f, a * r * d)
    return flat.real.copy(), flat.imag.copy()


def unpack_doppler(re: np.ndarray, im: np.ndarray, shape) -> np.ndarray:
    f, a, r, d = shape
    n = a * r * d
    return (np.asarray(re)[:, :n] + 1j * np.asarray(im)[:, :n]).reshape(f, a, r, d)


def encrypt_frames(session: Session, re: np.ndarray, im: np.ndarray):
    client = session.client
    return [client.encrypt(x) for x in re], [client.encrypt(x) for x in im]


def range_fft(adc: np.ndarray, window: bool = True) -> np.ndarray:
    """Plain client-side range FFT over the last axis (fast-time samples)."""
    adc = np.asarray(adc)
    w = np.hanning(adc.shape[-1]) if window else np.ones(adc.shape[-1])
    return np.fft.fft(adc * w, axis=-1)


# ---------------------------------------------------------------------------
# vitals: public plan
# ---------------------------------------------------------------------------


VITAL_OPS = {
    "Energy integ.": "Re^2+Im^2",
    "Soft attention": "E_r^gamma [-> r_hat]",
    "Phase extr.": "(|z|^2)^P * z, sum",
    "FIR filter": "pt-ct tap accumulation",
    "Taylor arctan": "y(3-3x+x^2)-y^3/3 (3rd-order)",
    "Window + DFT": "pt-ct inner product",
    "|X|^2": "Re^2+Im^2",
    "Merge + sharp^2": "merge + squaring",
    "Wt. freq. avg.": "pt-ct + sum [-> BPM]",
}


@dataclass
class VitalsBranch:
    name: str
    taps: np.ndarray
    plan: K.MatvecPlan


@dataclass
class VitalsPlan:
    """Every public operand of the vitals circuit for one cube shape."""

    frames: int
    range_bins: int
    frame_rate: float
    block: int  # L: resp rows in [0, L), heart rows in [L, 2L)
    resp_freqs: np.ndarray
    heart_freqs: np.ndarray
    branches: list
    ramp: np.ndarray
    depth_required: int
    gamma: int = 2
    digest: str = ""

    @property
    def dn_max(self) -> float:
        """Largest possible Dn: every normalized frame contributes at most 1 per bin."""
        return float(self.range_bins) * float(self.frames) ** self.gamma


def band_bins(frames: int, frame_rate: float, band) -> np.ndarray:
    """Indices k of the DFT grid ``k * fs / F`` inside ``band`` (inclusive)."""
    k = np.arange(frames // 2 + 1)
    f = k * frame_rate / frames
    tol = 1e-9 * frame_rate
    return k[(f >= band[0] - tol) & (f <= band[1] + tol)]


def iq_taps(cfg: VitalsConfig, frame_rate: float, which: str = "iq") -> np.ndarray:
    nyq = frame_rate / 2
    if which == "iq":
        if cfg.iq_cutoff >= nyq:
            raise ValueError(f"I/Q cutoff {cfg.iq_cutoff} Hz must be below Nyquist ({nyq} Hz)")
        h = signal.firwin(cfg.numtaps, cfg.iq_cutoff, fs=frame_rate)
    else:
        band = cfg.resp_band if which == "resp" else cfg.heart_band
        if band[1] >= nyq:
            raise ValueError(f"{which} band exceeds Nyquist ({nyq} Hz)")
        h = signal.firwin(cfg.numtaps, list(band), pass_zero=False, fs=frame_rate)
    return h * cfg.phase_scale


def vitals_plan(cfg: VitalsConfig, frames: int, range_bins: int, frame_rate: float, slot_count: int) -> VitalsPlan:
    cfg.validate()
    if frames < max(3, cfg.numtaps) or frames > slot_count:
        raise CapacityError(f"need {max(3, cfg.numtaps)} <= F <= {slot_count}, got F={frames}")
    if range_bins > slot_count:
        raise CapacityError(f"{range_bins} range bins exceed {slot_count} slots")
    kr = band_bins(frames, frame_rate, cfg.resp_band)
    kh = band_bins(frames, frame_rate, cfg.heart_band)
    if kr.size == 0 or kh.size == 0:
        raise ValueError("a vital band contains no DFT bin at this frame count and rate")
    block = 1 << max(0, (max(kr.size, kh.size) - 1).bit_length())
    if 2 * block > slot_count:
        raise CapacityError("passband bins exceed slot capacity")

    m = frames - 1
    win = np.hanning(m)
    norm = cfg.spectrum_gain / win.sum()
    t = np.arange(m)

    def rows(ks, row0, c, s):
        for i, k in enumerate(ks):
            ang = 2 * np.pi * k * t / frames
            c[row0 + i, :m] = norm * win * np.cos(ang)
            s[row0 + i, :m] = -norm * win * np.sin(ang)

    def dft(parts):
        c = np.zeros((2 * block, m))
        s = np.zeros((2 * block, m))
        for ks, row0 in parts:
            rows(ks, row0, c, s)
        n = slot_count
        return K.plan_matvec([[K.placed(c, n)], [K.placed(s, n)]], n)

    if cfg.iq_filter == "lowpass":
        branches = [VitalsBranch("iq", iq_taps(cfg, frame_rate, "iq"), dft([(kr, 0), (kh, block)]))]
    else:
        branches = [
            VitalsBranch("resp", iq_taps(cfg, frame_rate, "resp"), dft([(kr, 0)])),
            VitalsBranch("heart", iq_taps(cfg, frame_rate, "heart"), dft([(kh, block)])),
        ]
    ramp = np.zeros(slot_count)
    ramp[: kr.size] = kr * frame_rate / frames
    ramp[block : block + kh.size] = kh * frame_rate / frames

    k4 = K._log2_exact(cfg.p_phi, "P_phi") + 2  # from the fresh input
    taylor = 3 if cfg.taylor_order == 3 else 1
    depth = max(K._log2_exact(cfg.gamma, "gamma") + 1, k4 + 1 + taylor + 4)
    plan = VitalsPlan(
        frames, range_bins, frame_rate, block,
        kr * frame_rate / frames, kh * frame_rate / frames,
        branches, ramp, depth, gamma=cfg.gamma,
    )
    plan.digest = _digest({"pipeline": "vitals", "cfg": vars(cfg), "shape": [frames, range_bins], "fs": frame_rate})
    return plan


# ---------------------------------------------------------------------------
# vitals: cloud circuit
# ---------------------------------------------------------------------------


@dataclass
class VitalsOutputs:
    """Encrypted values returned to the client (slot 0 or slot L hold results)."""

    numerator: SlotVector  # N, slot 0
    denominator: SlotVector  # Dn, slot 0
    rate_num: SlotVector  # Nf: resp at slot 0, heart at slot L
    rate_den: SlotVector  # Df: same layout
    phase: list  # per-branch phase-step vectors (sent only when authorized)
    ledger: list
    range_bins: int
    probes: dict = field(default_factory=dict)


def vitals_circuit(vm: SlotVM, plan: VitalsPlan, cfg: VitalsConfig, re_frames, im_frames) -> VitalsOutputs:
    """Cloud side: K1 -> K2 -> K4 -> K5 -> K7 -> DFT -> |X|^2 -> sharpen -> average."""
    if len(re_frames) != plan.frames or len(im_frames) != plan.frames:
        raise ValueError("frame count does not match the plan")
    led = _Ledger(vm)
    probes = {}
    r = plan.range_bins
    with vm.stage("Energy integ."):
        res = [vm.input(h, r) for h in re_frames]
        ims = [vm.input(h, r) for h in im_frames]
        energy, powers = K.k1_energy(vm, res, ims, return_powers=True)
    led.mark("Energy integ.", VITAL_OPS["Energy integ."], energy)
    probes["K1"] = energy

    with vm.stage("Soft attention"):
        num, dn, w = K.k2_soft_attention(vm, energy, cfg.gamma)
    led.mark("Soft attention", f"E_r^{cfg.gamma} [-> r_hat]", w)
    probes["K2"] = w

    with vm.stage("Phase extr."):
        iq = K.k4_soft_iq_paired(vm, res, ims, cfg.p_phi, powers=powers)
    led.mark("Phase extr.", f"(|z|^2)^{cfg.p_phi} * z, sum", iq[0])
    probes["K4"] = iq

    with vm.stage("FIR filter"):
        filt = [K.k5_fir_paired(vm, iq, b.taps, r) for b in plan.branches]
    led.mark("FIR filter", VITAL_OPS["FIR filter"], filt[0][0])
    probes["K5"] = filt

    with vm.stage("Taylor arctan"):
        phase = [K.k7_taylor_phase(vm, i_f, q_f, cfg.taylor_order, cfg.taylor_form) for i_f, q_f in filt]
    op = "y (1st-order)" if cfg.taylor_order == 1 else (
        VITAL_OPS["Taylor arctan"] if cfg.taylor_form == "full" else "yx^2-y^3/3 (3rd-order)"
    )
    led.mark("Taylor arctan", op, phase[0])
    probes["K7"] = phase

    span = 2 * plan.block
    with vm.stage("Window + DFT"):
        spec = [K.run_matvec(vm, [ph], b.plan, [span, span]) for ph, b in zip(phase, plan.branches)]
    led.mark("Window + DFT", VITAL_OPS["Window + DFT"], spec[0][0])

    with vm.stage("|X|^2"):
        power = [K.frame_power(vm, xr, xi) for xr, xi in spec]
    led.mark("|X|^2", VITAL_OPS["|X|^2"], power[0])

    with vm.stage("Merge + sharp^2"):
        sharp = vm.square(vm.add_many(power))
    led.mark("Merge + sharp^2", VITAL_OPS["Merge + sharp^2"], sharp)

    with vm.stage("Wt. freq. avg."):
        df = K.window_sum(vm, sharp, plan.block)
        nf = K.window_sum(vm, vm.mul_plain(sharp, plan.ramp), plan.block)
    led.mark("Wt. freq. avg.", VITAL_OPS["Wt. freq. avg."], nf)
    return VitalsOutputs(num, dn, nf, df, phase, led.rows, r, probes)


# ---------------------------------------------------------------------------
# gesture: public plan and cloud circuit
# ---------------------------------------------------------------------------


GESTURE_OPS = {
    "Doppler DFT": "BSGS block-diag matmul",
    "|z|^2": "Re^2+Im^2",
    "Notch mask": "plaintext x cipher",
    "Soft power gamma": "squarings",
    "Feature weighting": "p x w",
    "Frame accum.": "addition only",
}


def slot_index(a: int, r: int, d: int, shape) -> int:
    _, rr, dd = shape
    return a * rr * dd + r * dd + d


def training_index(a: int, r: int, d: int, shape) -> int:
    """Feature order expected by FC weights: Doppler-major, then antenna, then range."""
    aa, rr, _ = shape
    return d * aa * rr + a * rr + r


def slot_permutation(a: int, r: int, d: int) -> np.ndarray:
    """``perm[slot] = training index`` for the interleaved layout."""
    aa, rr, dd = np.meshgrid(np.arange(a), np.arange(r), np.arange(d), indexing="ij")
    return (dd * a * r + aa * r + rr).ravel()


def fold_fc_weights(layers, a: int, r: int, d: int, frames: int) -> list:
    """Move the frame average and the slot permutation into the first layer."""
    w1, b1 = (np.asarray(x, dtype=np.float64) for x in layers[0])
    if w1.ndim != 2 or w1.shape[1] != a * r * d:
        raise ValueError(f"first layer expects {w1.shape[-1]} features, layout has {a * r * d}")
    for idx, ((w, b), (w_next, _)) in enumerate(zip(layers[:-1], layers[1:])):
        if np.shape(w_next)[1] != np.shape(w)[0] or np.shape(b) != (np.shape(w)[0],):
            raise ValueError(f"layer {idx + 1} dimensions do not chain")
    folded = w1[:, slot_permutation(a, r, d)] / frames
    return [(folded, b1)] + [(np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64)) for w, b in layers[1:]]


def dft_scale(a: int, r: int, d: int) -> float:
    """1/(sum(hann) * sqrt(A)): inputs are max-normalized, so every Doppler
    bin power stays at or below 1/A."""
    return 1.0 / (np.hanning(d).sum() * np.sqrt(a))


@dataclass
class GesturePlan:
    frames: int
    antennas: int
    range_bins: int
    chirps: int
    scale: float
    layers: list  # folded
    fc_plans: list
    digest: str = ""


def gesture_plan(cfg: GestureConfig, shape, slot_count: int, layers) -> GesturePlan:
    cfg.validate()
    f, a, r, d = shape
    if a * r * d > slot_count:
        raise CapacityError(f"{a * r * d} active slots exceed {slot_count}")
    if d < 2 or d & (d - 1):
        raise ValueError("chirp count must be a power of two >= 2")
    folded = fold_fc_weights(layers, a, r, d, f)
    plans = K.fc_plans(folded, slot_count)
    plan = GesturePlan(f, a, r, d, dft_scale(a, r, d), folded, plans)
    wd = hashlib.sha256(b"".join(np.ascontiguousarray(w).tobytes() + np.ascontiguousarray(b).tobytes() for w, b in layers))
    plan.digest = _digest({"pipeline": "gesture", "cfg": vars(cfg), "shape": list(shape), "weights": wd.hexdigest()})
    return plan


@dataclass
class GestureOutputs:
    logits: SlotVector
    ledger: list
    probes: dict = field(default_factory=dict)


def gesture_circuit(vm: SlotVM, plan: GesturePlan, cfg: GestureConfig, re_frames, im_frames) -> GestureOutputs:
    """Cloud side: per frame K3 -> |z|^2 -> K6 -> soft power -> weighting; sum; FC."""
    a, r, d = plan.antennas, plan.range_bins, plan.chirps
    span = a * r * d
    if len(re_frames) != plan.frames or len(im_frames) != plan.frames:
        raise ValueError("frame count does not match the plan")
    feats = []
    first = {}
    for t, (hr, hi) in enumerate(zip(re_frames, im_frames)):
        with vm.stage("Doppler DFT"):
            xr, xi = K.k3_dft(vm, vm.input(hr, span), vm.input(hi, span), a, r, d, plan.scale)
        with vm.stage("|z|^2"):
            p = K.frame_power(vm, xr, xi)
        with vm.stage("Notch mask"):
            pn = K.k6_notch(vm, p, a, r, d, cfg.notch_width)
        with vm.stage("Soft power"):
            feat, weights = K.k2_doppler_soft_power(vm, pn, a, r, d, cfg.gamma)
        feats.append(feat)
        if t == 0:
            first = {"K3": (xr, xi), "p": p, "K6": pn, "w": weights, "feat": feat}
    with vm.stage("Frame accum."):
        acc = vm.add_many(feats)
    with vm.stage("FC"):
        logits, hidden = K.fc_forward(vm, acc, plan.layers, plan.fc_plans, return_hidden=True)

    led = _Ledger(vm)
    led.mark("Doppler DFT", GESTURE_OPS["Doppler DFT"], first["K3"][0])
    led.mark("|z|^2", GESTURE_OPS["|z|^2"], first["p"])
    led.mark("Notch mask", GESTURE_OPS["Notch mask"], first["K6"])
    led.mark(f"Soft power gamma={cfg.gamma}", f"{K._log2_exact(cfg.gamma, 'gamma')} squarings", first["w"])
    led.mark("Feature weighting", GESTURE_OPS["Feature weighting"], first["feat"])
    led.mark("Frame accum.", GESTURE_OPS["Frame accum."], acc)
    n_layers = len(plan.layers)
    for i, h in enumerate(hidden):
        last = i == n_layers - 1
        name = f"FC{i + 1}" if last else f"FC{i + 1} + square"
        led.mark(name, "matmul (final logits)" if last else "matmul + x^2", h)
    probes = {"K3": first["K3"], "K6": first["K6"], "K2g": first["feat"], "FC": logits}
    return GestureOutputs(logits, led.rows, probes)


# ---------------------------------------------------------------------------
# client: recovery
# ---------------------------------------------------------------------------


@dataclass
class VitalResult:
    target_bin: float | None
    numerator: float
    denominator: float
    rr_bpm: float | None
    hr_bpm: float | None
    low_confidence: bool
    phase: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "target_bin": self.target_bin,
            "numerator": self.numerator,
            "denominator": self.denominator,
            "rr_bpm": self.rr_bpm,
            "hr_bpm": self.hr_bpm,
            "low_confidence": self.low_confidence,
        }


@dataclass
class ClassResult:
    logits: np.ndarray
    predicted: int

    def to_dict(self) -> dict:
        return {"logits": [float(x) for x in self.logits], "predicted": self.predicted}


def safe_ratio(num: float, den: float, threshold: float):
    """``num / den`` or None when ``den`` is at or below ``threshold``."""
    return None if not den > threshold else num / den


def recover_vitals(client, out: VitalsOutputs, plan: VitalsPlan, cfg: VitalsConfig) -> VitalResult:
    """Decrypt the two scalar pairs and divide; no other computation happens here."""
    n_val = float(client.decrypt(out.numerator.handle, 1)[0])
    dn_val = float(client.decrypt(out.denominator.handle, 1)[0])
    nf = client.decrypt(out.rate_num.handle, 2 * plan.block)
    df = client.decrypt(out.rate_den.handle, 2 * plan.block)
    return vitals_from_scalars(n_val, dn_val, nf[[0, plan.block]], df[[0, plan.block]], plan, cfg,
                               phase=_decrypt_phase(client, out) if cfg.return_phase else None)


def _decrypt_phase(client, out: VitalsOutputs):
    return np.stack([client.decrypt(p.handle, p.length) for p in out.phase])


def vitals_from_scalars(n_val, dn_val, nf, df, plan: VitalsPlan, cfg: VitalsConfig, phase=None) -> VitalResult:
    thr_dn = cfg.low_confidence * plan.dn_max
    target = safe_ratio(n_val, dn_val, thr_dn)
    rates = []
    for num, den, ks in zip(nf, df, (plan.resp_freqs, plan.heart_freqs)):
        f = safe_ratio(float(num), float(den), cfg.low_confidence * ks.size * cfg.spectrum_gain**4)
        rates.append(None if f is None else 60.0 * f)
    low = target is None or rates[0] is None or rates[1] is None
    if target is not None:
        target = float(np.clip(target, 0.0, plan.range_bins - 1))
    return VitalResult(target, n_val, dn_val, rates[0], rates[1], low, phase)


def recover_class(client, out: GestureOutputs) -> ClassResult:
    logits = client.decrypt(out.logits.handle, out.logits.length)
    return ClassResult(logits, int(np.argmax(logits)))


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------


@dataclass
class PipelineRun:
    result: object
    trace: TraceRecord
    ledger: list
    outputs: object
    backend: str
    plan: object

    def report(self, config_digest: str = "") -> dict:
        return {
            "backend": self.backend,
            "config_digest": config_digest,
            "plan_digest": self.plan.digest,
            "result": self.result.to_dict() if self.result is not None else None,
            "depth_ledger": [vars(r) for r in self.ledger],
            "decrypt_points": decrypt_points(self.outputs),
            "trace_digest": self.trace.digest(),
            "trace_events": len(self.trace),
            "rotations": self.trace.count("rotate"),
        }


def decrypt_points(out) -> list:
    if isinstance(out, VitalsOutputs):
        pts = [
            {"name": "target (N, Dn)", "level": out.denominator.level},
            {"name": "rate (Nf, Df)", "level": out.rate_num.level},
        ]
        return pts
    return [{"name": "logits", "level": out.logits.level}]


def _vitals_plan_for(cube: RadarCube, cfg: VitalsConfig, slot_count: int) -> VitalsPlan:
    f, _, r, _ = cube.shape
    return vitals_plan(cfg, f, r, cube.frame_rate, slot_count)


def run_vitals(cube: RadarCube, cfg: VitalsConfig, session: Session, plan: VitalsPlan | None = None) -> PipelineRun:
    plan = plan or _vitals_plan_for(cube, cfg, session.params.slot_count)
    frames = client_preprocess(cube, "vital", cfg.antenna)
    re, im = pack_vital(frames, session.params.slot_count)
    hre, him = encrypt_frames(session, re, im)
    vm = session.new_vm(plan.digest)
    out = vitals_circuit(vm, plan, cfg, hre, him)
    result = recover_vitals(session.client, out, plan, cfg) if session.kind != "levelsim" else None
    return PipelineRun(result, vm.trace, out.ledger, out, session.kind, plan)


def gesture_required_depth(cfg: GestureConfig, n_layers: int) -> int:
    return 3 + K._log2_exact(cfg.gamma, "gamma") + 1 + 2 * n_layers - 1


def run_gesture(cube: RadarCube, cfg: GestureConfig, layers, session: Session, plan: GesturePlan | None = None) -> PipelineRun:
    plan = plan or gesture_plan(cfg, cube.shape, session.params.slot_count, layers)
    frames = client_preprocess(cube, "gesture")
    re, im = pack_doppler(frames, session.params.slot_count)
    hre, him = encrypt_frames(session, re, im)
    vm = session.new_vm(plan.digest)
    out = gesture_circuit(vm, plan, cfg, hre, him)
    result = recover_class(session.client, out) if session.kind != "levelsim" else None
    return PipelineRun(result, vm.trace, out.ledger, out, session.kind, plan)


# ---------------------------------------------------------------------------
# sessions and dry runs
# ---------------------------------------------------------------------------


def zero_cube_like(shape, frame_rate: float = 20.0, wavelength: float = 0.005) -> RadarCube:
    return RadarCube(np.zeros(shape, dtype=np.complex128), frame_rate, wavelength)


def dry_run(pipeline: str, cfg: Config, shape, frame_rate: float, params: CkksParams, layers=None) -> PipelineRun:
    """Level-only execution: ledger, trace and rotation set without arithmetic."""
    session = levelsim_session(params)
    cube = zero_cube_like(shape, frame_rate)
    if pipeline == "vitals":
        return run_vitals(cube, cfg.vitals, session)
    if pipeline == "gesture":
        return run_gesture(cube, cfg.gesture, layers, session)
    raise ValueError(f"unknown pipeline {pipeline!r}")


def make_session(kind: str, params: CkksParams, rotations=None, seed=None, keys=None) -> Session:
    if kind == "exactsim":
        return exactsim_session(params, rotations)
    if kind == "ckks":
        return ckks_session(params, sorted(rotations or ()), seed=seed, keys=keys)
    if kind == "levelsim":
        return levelsim_session(params)
    raise ValueError(f"unknown backend {kind!r}")


def default_fc_layers(dims, seed: int = 0) -> list:
    """Seeded random weights (fixture only): Gaussian with 1/sqrt(fan-in) spread."""
    rng = np.random.default_rng(seed)
    return [
        (rng.normal(0, 1 / np.sqrt(i), (o, i)), rng.normal(0, 0.1, o))
        for i, o in zip(dims[:-1], dims[1:])
    ]


def load_fc_layers(path) -> list:
    with np.load(path) as z:
        count = sum(1 for k in z.files if k.startswith("W"))
        if count == 0:
            raise ValueError("weight file has no W0 array")
        return [(z[f"W{i}"], z[f"b{i}"]) for i in range(count)]


def save_fc_layers(layers, path) -> None:
    arrays = {}
    for i, (w, b) in enumerate(layers):
        arrays[f"W{i}"] = np.asarray(w)
        arrays[f"b{i}"] = np.asarray(b)
    np.savez(path, **arrays)


def fc_layers_for(cfg: GestureConfig) -> list:
    if cfg.weights:
        return load_fc_layers(cfg.weights)
    return default_fc_layers(cfg.fc_dims, cfg.weight_seed)


# ---------------------------------------------------------------------------
# fidelity probes (client side, debugging and reporting only)
# ---------------------------------------------------------------------------


def _dec(client, x: SlotVector, length=None) -> np.ndarray:
    return client.decrypt(x.handle, x.length if length is None else length)


def decrypt_probes(client, out, top_level: int) -> dict:
    """Decrypt the per-kernel intermediate outputs; returns ``{name: (values, depth)}``.

    Only for fidelity reporting: a production client receives the final
    outputs alone.
    """
    probes = {}

    def depth(x):
        return top_level - x.level

    if isinstance(out, VitalsOutputs):
        p = out.probes
        probes["K1"] = (_dec(client, p["K1"]), depth(p["K1"]))
        probes["K2"] = (_dec(client, p["K2"]), depth(p["K2"]))
        iq = p["K4"]
        off_i, off_q = K.iq_offsets(iq[0].length, out.range_bins)
        both = np.array([_dec(client, x)[[off_i, off_q]] for x in iq])
        probes["K4"] = (both.T.ravel(), depth(iq[0]))
        i_f, q_f = p["K5"][0]
        probes["K5"] = (np.concatenate([_dec(client, i_f), _dec(client, q_f)]), depth(i_f))
        probes["K7"] = (_dec(client, p["K7"][0]), depth(p["K7"][0]))
    else:
        p = out.probes
        xr, xi = p["K3"]
        probes["K3"] = (np.concatenate([_dec(client, xr), _dec(client, xi)]), depth(xr))
        probes["K6"] = (_dec(client, p["K6"]), depth(p["K6"]))
        probes["K2g"] = (_dec(client, p["K2g"]), depth(p["K2g"]))
        probes["FC"] = (_dec(client, p["FC"]), depth(p["FC"]))
    return probes


KERNEL_ORDER = ("K1", "K2", "K3", "K4", "K5", "K6", "K7", "K2g", "FC")


def fidelity_rows(enc_probes: dict, plain_probes: dict):
    """Per-kernel rows comparing two probe sets, in kernel order."""
    from .oracle import fidelity_report

    names = [k for k in KERNEL_ORDER if k in enc_probes]
    enc = {k: enc_probes[k][0] for k in names}
    plain = {k: plain_probes[k][0] for k in names}
    return fidelity_report(enc, plain, {k: enc_probes[k][1] for k in names})
