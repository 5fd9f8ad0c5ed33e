import numpy as np
import pytest

from oblivdsp.synth import SceneSpec, Target, generate_cube, random_gesture_spec, vitals_fixture_spec


def test_clutter_only_cube_is_constant():
    cube = generate_cube(SceneSpec(clutter=0.5, frames=10, range_bins=4, antennas=2, chirps=3), seed=1)
    z = cube.samples
    assert np.allclose(z, z[:1, :, :, :1])
    assert np.allclose(np.abs(z), 0.5)


def test_constant_offset_phase():
    lam, d0 = 0.005, 0.0003
    spec = SceneSpec(targets=[Target(2, 1.0, offset=d0)], frames=5, range_bins=4, wavelength=lam)
    z = generate_cube(spec, seed=0).samples[:, 0, 2, 0]
    assert np.allclose(z, np.exp(1j * 4 * np.pi * d0 / lam))


def test_breathing_phase_swing():
    spec = SceneSpec(targets=[Target(0, 1.0, [(0.25, 0.004)])], frames=400, range_bins=1)
    z = generate_cube(spec, seed=0).samples[:, 0, 0, 0]
    phase = np.unwrap(np.angle(z))
    assert np.ptp(phase) == pytest.approx(4 * np.pi * 0.008 / 0.005, rel=1e-3)


def test_single_tone_spectrum_peak():
    spec = SceneSpec(targets=[Target(1, 1.0, [(0.5, 0.0001)])], frames=200, range_bins=2)
    z = generate_cube(spec, seed=0).samples[:, 0, 1, 0]
    phase = np.unwrap(np.angle(z))
    spec_ = np.abs(np.fft.rfft(phase - phase.mean()))
    assert np.argmax(spec_) * 20.0 / 200 == pytest.approx(0.5)


def test_seed_determinism():
    a = generate_cube(vitals_fixture_spec(), seed=4).samples
    b = generate_cube(vitals_fixture_spec(), seed=4).samples
    c = generate_cube(vitals_fixture_spec(), seed=5).samples
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_nyquist_violation():
    spec = SceneSpec(targets=[Target(0, 1.0, [(10.0, 0.001)])], frame_rate=20.0, range_bins=1)
    with pytest.raises(ValueError):
        generate_cube(spec)


def test_bad_bin_and_dims():
    with pytest.raises(ValueError):
        generate_cube(SceneSpec(targets=[Target(5)], range_bins=4))
    with pytest.raises(ValueError):
        generate_cube(SceneSpec(frames=0))


def test_velocity_gives_doppler_peak():
    lam, fr, chirps = 0.005, 33.0, 8
    tc = 1.0 / (fr * chirps)
    v = 2 * lam / (2 * tc * chirps)  # phase step 4 pi v tc / lam = 2 pi * 2 / chirps
    spec = SceneSpec(targets=[Target(0, 1.0, velocity=v)], frame_rate=fr, frames=1, range_bins=1,
                     chirps=chirps, wavelength=lam)
    z = generate_cube(spec, seed=0).samples[0, 0, 0]
    assert int(np.argmax(np.abs(np.fft.fft(z)))) == 2


def test_noise_level(rng):
    spec = SceneSpec(noise_std=0.1, frames=400, range_bins=8)
    z = generate_cube(spec, seed=2).samples
    assert np.std(z) == pytest.approx(0.1, rel=0.05)


def test_random_gesture_spec_shape(rng):
    spec = random_gesture_spec(rng, 2, 4, 8, 4)
    assert generate_cube(spec, seed=0).shape == (4, 2, 4, 8)
