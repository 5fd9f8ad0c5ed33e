"""Plaintext reference DSP and fidelity metrics.

Two families live here. The ``kernel_*`` and ``plain_*`` functions evaluate
the same formulas as the encrypted kernels with ordinary numpy, so encrypted
runs can be checked against them. The ``standard_*`` functions are the
conventional pipeline (hard argmax, atan2, unwrap, FFT peak pick) that the
encrypted circuits approximate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# kernel oracles (direct formulas)
# ---------------------------------------------------------------------------


def kernel_energy(frames: np.ndarray) -> np.ndarray:
    """frames: complex (F, R)."""
    return np.sum(np.abs(frames) ** 2, axis=0)


def kernel_soft_attention(energy: np.ndarray, gamma: int):
    w = np.asarray(energy, dtype=np.float64) ** gamma
    r = np.arange(w.size)
    return float(np.sum(r * w)), float(np.sum(w)), w


def kernel_doppler_soft_power(power: np.ndarray, gamma: int = 4) -> np.ndarray:
    """power: (A, R, D) nonnegative; each cell weighted by its Doppler column sum**gamma."""
    col = power.sum(axis=(0, 1))
    return power * col[None, None, :] ** gamma


def kernel_dft(cube_frame: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """cube_frame: complex (A, R, D) -> shifted, Hanning-windowed Doppler spectrum."""
    d = cube_frame.shape[-1]
    return scale * np.fft.fftshift(np.fft.fft(cube_frame * np.hanning(d), axis=-1), axes=-1)


def kernel_soft_iq(frames: np.ndarray, p_phi: int = 2):
    """frames: complex (F, R) -> (I, Q) arrays of length F."""
    m = (np.abs(frames) ** 2) ** p_phi
    return np.sum(m * frames.real, axis=1), np.sum(m * frames.imag, axis=1)


def kernel_fir(x: np.ndarray, taps) -> np.ndarray:
    """Causal direct convolution truncated to len(x)."""
    x = np.asarray(x, dtype=np.float64)
    h = np.asarray(taps, dtype=np.float64)
    out = np.zeros_like(x)
    for t in range(x.size):
        for k in range(min(h.size, t + 1)):
            out[t] += h[k] * x[t - k]
    return out


def kernel_notch(spec: np.ndarray, width: int = 1) -> np.ndarray:
    """spec: (..., D); zero bins within width-1 of D/2."""
    d = spec.shape[-1]
    out = np.array(spec, dtype=np.float64, copy=True)
    c = d // 2
    out[..., max(0, c - width + 1) : min(d, c + width)] = 0.0
    return out


def kernel_taylor_phase(i_f, q_f, order: int = 3, form: str = "full") -> np.ndarray:
    i_f = np.asarray(i_f, dtype=np.float64)
    q_f = np.asarray(q_f, dtype=np.float64)
    y = q_f[1:] * i_f[:-1] - i_f[1:] * q_f[:-1]
    x = i_f[1:] * i_f[:-1] + q_f[1:] * q_f[:-1]
    if order == 1:
        return y
    if form == "full":
        return y * (x * x - 3 * x + 3) - y**3 / 3
    return y * x * x - y**3 / 3


def atan2_phase_steps(i_f, q_f) -> np.ndarray:
    w = np.asarray(i_f) + 1j * np.asarray(q_f)
    return np.angle(w[1:] * np.conj(w[:-1]))


def kernel_fc(x: np.ndarray, layers) -> np.ndarray:
    h = np.asarray(x, dtype=np.float64)
    for idx, (w, b) in enumerate(layers):
        h = np.asarray(w) @ h + np.asarray(b)
        if idx < len(layers) - 1:
            h = h * h
    return h


# ---------------------------------------------------------------------------
# the same pipelines in plain numpy
# ---------------------------------------------------------------------------


@dataclass
class PlainVitals:
    numerator: float
    denominator: float
    rate_num: np.ndarray  # (resp, heart)
    rate_den: np.ndarray
    stages: dict = field(repr=False)


def _band_freqs(frames, fs, band):
    k = np.arange(frames // 2 + 1)
    f = k * fs / frames
    tol = 1e-9 * fs
    return k[(f >= band[0] - tol) & (f <= band[1] + tol)]


def plain_vitals_pipeline(
    frames: np.ndarray,
    frame_rate: float,
    branches,
    gamma: int = 2,
    p_phi: int = 2,
    order: int = 3,
    form: str = "full",
    resp_band=(0.1, 0.6),
    heart_band=(0.8, 2.5),
    gain: float = 1.0,
) -> PlainVitals:
    """Vitals pipeline on preprocessed complex frames ``(F, R)``.

    ``branches`` is a list of ``(taps, bands)`` where ``bands`` names the
    passbands ("resp", "heart") whose bins that branch feeds.
    """
    f, r = frames.shape
    energy = kernel_energy(frames)
    num, den, w = kernel_soft_attention(energy, gamma)
    i_s, q_s = kernel_soft_iq(frames, p_phi)
    m = f - 1
    win = np.hanning(m)
    n = np.arange(m)
    bins = {"resp": _band_freqs(f, frame_rate, resp_band), "heart": _band_freqs(f, frame_rate, heart_band)}
    power = {"resp": np.zeros(bins["resp"].size), "heart": np.zeros(bins["heart"].size)}
    stages = {"K1": energy, "K2": w, "K4": np.concatenate([i_s, q_s])}
    for idx, (taps, bands) in enumerate(branches):
        i_f, q_f = kernel_fir(i_s, taps), kernel_fir(q_s, taps)
        phase = kernel_taylor_phase(i_f, q_f, order, form)
        if idx == 0:
            stages["K5"] = np.concatenate([i_f, q_f])
            stages["K7"] = phase
        for b in bands:
            basis = np.exp(-2j * np.pi * np.outer(bins[b], n) / f)
            x = gain * (basis @ (win * phase)) / win.sum()
            power[b] = power[b] + np.abs(x) ** 2
    sharp = {b: p**2 for b, p in power.items()}
    nf = np.array([np.sum(bins[b] * frame_rate / f * sharp[b]) for b in ("resp", "heart")])
    df = np.array([np.sum(sharp[b]) for b in ("resp", "heart")])
    return PlainVitals(num, den, nf, df, stages)


def plain_gesture_features(frames: np.ndarray, gamma: int = 4, notch_width: int = 1) -> np.ndarray:
    """Frame-averaged soft-power features of ``(F, A, R, D)`` frames, ordered
    Doppler-major: index ``d*A*R + a*R + r``."""
    f, a, r, d = frames.shape
    s = a * np.hanning(d).sum() ** 2
    spec = kernel_dft(frames, 1.0 / np.sqrt(s))
    p = kernel_notch(np.abs(spec) ** 2, notch_width)
    feats = np.mean([kernel_doppler_soft_power(p[t], gamma) for t in range(f)], axis=0)
    return feats.transpose(2, 0, 1).ravel()


def plain_gesture_logits(frames: np.ndarray, layers, gamma: int = 4, notch_width: int = 1) -> np.ndarray:
    return kernel_fc(plain_gesture_features(frames, gamma, notch_width), layers)


# ---------------------------------------------------------------------------
# standard DSP baseline
# ---------------------------------------------------------------------------


@dataclass
class StandardVitals:
    target_bin: int
    rr_bpm: float | None
    hr_bpm: float | None
    phase: np.ndarray = field(repr=False)
    empty: bool = False


def unwrap_phase(phase: np.ndarray) -> np.ndarray:
    return np.unwrap(phase)


def band_fir(band, fs: float, numtaps: int = 31) -> np.ndarray:
    return signal.firwin(numtaps, list(band), pass_zero=False, fs=fs)


def peak_rate(x: np.ndarray, fs: float, band, nfft: int | None = None):
    """Peak frequency (in bpm) of ``x`` inside ``band``; None when the band is empty."""
    nfft = nfft or x.size
    spec = np.abs(np.fft.rfft(x * np.hanning(x.size), nfft)) ** 2
    freqs = np.fft.rfftfreq(nfft, 1.0 / fs)
    sel = (freqs >= band[0]) & (freqs <= band[1])
    if not sel.any() or spec[sel].max() <= 1e-20:
        return None
    return float(60.0 * freqs[sel][np.argmax(spec[sel])])


def standard_vitals(
    samples: np.ndarray,
    frame_rate: float,
    resp_band=(0.1, 0.6),
    heart_band=(0.8, 2.5),
    numtaps: int = 31,
) -> StandardVitals:
    """Hard argmax bin, atan2 phase, unwrap, differentiate, band FIR, FFT peak.

    ``samples`` are complex (F, R) range profiles of one antenna and chirp.
    """
    z = samples - samples.mean(axis=0, keepdims=True)
    energy = np.sum(np.abs(z) ** 2, axis=0)
    if energy.max() <= 1e-20:
        return StandardVitals(0, None, None, np.zeros(samples.shape[0] - 1), empty=True)
    r = int(np.argmax(energy))  # lowest index wins ties
    dphi = np.diff(unwrap_phase(np.angle(z[:, r])))
    resp = signal.lfilter(band_fir(resp_band, frame_rate, numtaps), 1.0, dphi)
    heart = signal.lfilter(band_fir(heart_band, frame_rate, numtaps), 1.0, dphi)
    rr = peak_rate(resp, frame_rate, resp_band)
    hr = peak_rate(heart, frame_rate, heart_band)
    return StandardVitals(r, rr, hr, dphi, empty=rr is None and hr is None)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class FidelityRow:
    kernel: str
    mse: float
    max_err: float
    depth: int

    def line(self) -> str:
        return f"{self.kernel:<6} {self.mse:>12.3e} {self.max_err:>12.3e} {self.depth:>6d}"


FIDELITY_HEADER = f"{'Kernel':<6} {'MSE':>12} {'max|err|':>12} {'Depth':>6}"


def fidelity_report(enc_out: dict, plain_out: dict, depths: dict | None = None) -> list:
    """Per-stage MSE and max abs error between two runs of the same configuration."""
    if set(enc_out) != set(plain_out):
        raise ValueError("stage sets differ")
    rows = []
    for name in enc_out:
        a = np.asarray(enc_out[name], dtype=np.float64)
        b = np.asarray(plain_out[name], dtype=np.float64)
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch at {name}: {a.shape} vs {b.shape}")
        diff = a - b
        mse = float(np.mean(diff**2)) if diff.size else 0.0
        mx = float(np.max(np.abs(diff))) if diff.size else 0.0
        rows.append(FidelityRow(name, mse, mx, int((depths or {}).get(name, 0))))
    return rows


def format_fidelity(rows) -> str:
    return "\n".join([FIDELITY_HEADER] + [r.line() for r in rows])


@dataclass
class GapReport:
    phase_mse: dict
    rate_delta: dict


def _znorm(x):
    x = np.asarray(x, dtype=np.float64)
    s = x.std()
    return (x - x.mean()) / s if s > 0 else x - x.mean()


def approx_gap_report(fhe_phase, std_phase, fhe_rates: dict, std_rates: dict, bands: dict, fs: float, numtaps=31):
    """Band-wise MSE between z-scored phase waveforms plus per-band rate deltas.

    ``fhe_phase`` and ``std_phase`` are phase-step sequences of equal length.
    """
    fhe_phase = np.asarray(fhe_phase, dtype=np.float64)
    std_phase = np.asarray(std_phase, dtype=np.float64)
    if fhe_phase.shape != std_phase.shape:
        raise ValueError("phase waveforms differ in length")
    mse, delta = {}, {}
    for name, band in bands.items():
        h = band_fir(band, fs, numtaps)
        a = _znorm(signal.lfilter(h, 1.0, fhe_phase))
        b = _znorm(signal.lfilter(h, 1.0, std_phase))
        mse[name] = float(np.mean((a - b) ** 2))
        ra, rb = fhe_rates.get(name), std_rates.get(name)
        delta[name] = None if ra is None or rb is None else abs(ra - rb)
    return GapReport(mse, delta)


# ---------------------------------------------------------------------------
# tiny FC trainer (fixture generator)
# ---------------------------------------------------------------------------


def train_square_mlp(x, labels, dims, epochs=300, lr=0.05, seed=0):
    """Full-batch gradient descent on softmax cross-entropy for a square-activated MLP.

    ``x`` is (samples, features); returns a list of ``(W, b)``. Inputs are
    standardized inside and the standardization is folded into layer 1.
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    mu, sd = x.mean(axis=0), x.std(axis=0) + 1e-12
    xs = (x - mu) / sd
    y = np.eye(dims[-1])[np.asarray(labels)]
    layers = [
        [rng.normal(0, 1 / np.sqrt(i), (o, i)), np.zeros(o)] for i, o in zip(dims[:-1], dims[1:])
    ]
    for _ in range(epochs):
        acts, pre = [xs.T], []
        h = xs.T
        for k, (w, b) in enumerate(layers):
            z = w @ h + b[:, None]
            pre.append(z)
            h = z * z if k < len(layers) - 1 else z
            acts.append(h)
        logits = acts[-1] - acts[-1].max(axis=0)
        p = np.exp(logits) / np.exp(logits).sum(axis=0)
        g = (p - y.T) / x.shape[0]
        for k in range(len(layers) - 1, -1, -1):
            w, b = layers[k]
            gw, gb = g @ acts[k].T, g.sum(axis=1)
            g = w.T @ g
            if k > 0:
                g = g * 2 * pre[k - 1]
            layers[k][0] = w - lr * gw
            layers[k][1] = b - lr * gb
    w1, b1 = layers[0]
    layers[0] = [w1 / sd[None, :], b1 - (w1 / sd[None, :]) @ mu]
    return [(w, b) for w, b in layers]


def calibrated_random_mlp(features: np.ndarray, dims, seed=0):
    """Random square-activated MLP whose pre-activations are roughly unit-variance
    on the given feature sample, so argmax decisions depend on the input."""
    rng = np.random.default_rng(seed)
    h = np.asarray(features, dtype=np.float64).T
    layers = []
    for k, (i, o) in enumerate(zip(dims[:-1], dims[1:])):
        w = rng.normal(0, 1, (o, i))
        z = w @ h
        mu = z.mean(axis=1)
        sd = z.std(axis=1) + 1e-30
        w = w / sd[:, None]
        b = -mu / sd
        layers.append((w, b))
        z = w @ h + b[:, None]
        h = z * z if k < len(dims) - 2 else z
    return layers
