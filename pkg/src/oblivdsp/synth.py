"""Synthetic FMCW range-profile cubes with known ground truth.

A target at a range bin returns ``amplitude * exp(j * 4*pi*d(tau)/lambda)``,
where ``d(tau)`` is its radial displacement at slow time ``tau``. Chirps
within a frame sample ``tau`` at ``chirp_interval`` spacing, so a radial
velocity shows up as a linear phase across chirps (Doppler). Static clutter
and circular complex Gaussian noise are added per sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .formats import RadarCube


@dataclass
class Target:
    range_bin: int
    amplitude: float = 1.0
    motions: list = field(default_factory=list)  # (freq Hz, displacement m[, phase rad])
    velocity: float = 0.0  # m/s, radial
    offset: float = 0.0  # m, constant displacement
    antenna_phase: float = 0.0  # rad increment per antenna

    def displacement(self, tau: np.ndarray) -> np.ndarray:
        d = self.offset + self.velocity * tau
        for m in self.motions:
            f, amp = m[0], m[1]
            ph = m[2] if len(m) > 2 else 0.0
            d = d + amp * np.sin(2 * np.pi * f * tau + ph)
        return d


@dataclass
class SceneSpec:
    targets: list = field(default_factory=list)
    clutter: float = 0.0
    noise_std: float = 0.0
    wavelength: float = 0.005
    frame_rate: float = 20.0
    frames: int = 200
    antennas: int = 1
    range_bins: int = 16
    chirps: int = 1
    chirp_interval: float | None = None

    def validate(self) -> None:
        if min(self.frames, self.antennas, self.range_bins, self.chirps) < 1:
            raise ValueError("cube dimensions must be positive")
        nyq = self.frame_rate / 2
        for t in self.targets:
            if not 0 <= t.range_bin < self.range_bins:
                raise ValueError(f"target bin {t.range_bin} outside 0..{self.range_bins - 1}")
            for m in t.motions:
                if m[0] >= nyq:
                    raise ValueError(f"motion at {m[0]} Hz violates Nyquist ({nyq} Hz)")


def generate_cube(spec: SceneSpec, seed=None) -> RadarCube:
    spec.validate()
    rng = np.random.default_rng(seed)
    f, a, r, c = spec.frames, spec.antennas, spec.range_bins, spec.chirps
    tc = spec.chirp_interval if spec.chirp_interval is not None else 1.0 / (spec.frame_rate * c)
    tau = np.arange(f)[:, None] / spec.frame_rate + np.arange(c)[None, :] * tc  # (F, C)

    z = np.zeros((f, a, r, c), dtype=np.complex128)
    clutter_phase = rng.uniform(0, 2 * np.pi, (a, r))
    z += (spec.clutter * np.exp(1j * clutter_phase))[None, :, :, None]
    for t in spec.targets:
        ph = 4 * np.pi * t.displacement(tau) / spec.wavelength  # (F, C)
        ant = np.exp(1j * t.antenna_phase * np.arange(a))  # (A,)
        z[:, :, t.range_bin, :] += t.amplitude * np.exp(1j * ph)[:, None, :] * ant[None, :, None]
    if spec.noise_std > 0:
        s = spec.noise_std / np.sqrt(2)
        z += rng.normal(0, s, z.shape) + 1j * rng.normal(0, s, z.shape)
    return RadarCube(z, spec.frame_rate, spec.wavelength)


def vitals_fixture_spec(noise_std: float = 0.05) -> SceneSpec:
    """Seated subject at bin 12: breathing 0.25 Hz +-4 mm, heartbeat 1.2 Hz +-0.3 mm."""
    target = Target(range_bin=12, amplitude=1.0, motions=[(0.25, 0.004), (1.2, 0.0003)])
    return SceneSpec(
        targets=[target],
        clutter=0.3,
        noise_std=noise_std,
        wavelength=0.005,
        frame_rate=20.0,
        frames=200,
        antennas=1,
        range_bins=16,
        chirps=1,
    )


def random_gesture_spec(rng, antennas=2, range_bins=4, chirps=8, frames=4, frame_rate=33.0) -> SceneSpec:
    """One or two moving reflectors with random bins, velocities and amplitudes."""
    lam = 0.005
    tc = 1.0 / (frame_rate * chirps)
    vmax = lam / (4 * tc)  # unambiguous radial speed
    targets = []
    for _ in range(int(rng.integers(1, 3))):
        targets.append(
            Target(
                range_bin=int(rng.integers(0, range_bins)),
                amplitude=float(rng.uniform(0.3, 1.0)),
                velocity=float(rng.uniform(-0.9, 0.9) * vmax),
                antenna_phase=float(rng.uniform(-np.pi, np.pi)),
            )
        )
    return SceneSpec(
        targets=targets,
        clutter=float(rng.uniform(0, 0.5)),
        noise_std=0.05,
        wavelength=lam,
        frame_rate=frame_rate,
        frames=frames,
        antennas=antennas,
        range_bins=range_bins,
        chirps=chirps,
    )
