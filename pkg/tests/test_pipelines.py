import dataclasses

import numpy as np
import pytest

from oblivdsp import kernels as K
from oblivdsp import oracle as O
from oblivdsp.ckks import CkksParams
from oblivdsp.config import Config, GestureConfig, VitalsConfig
from oblivdsp.formats import RadarCube
from oblivdsp.pipelines import (
    CapacityError,
    VitalsOutputs,
    client_preprocess,
    decrypt_probes,
    dry_run,
    fold_fc_weights,
    format_ledger,
    gesture_plan,
    make_session,
    pack_doppler,
    pack_vital,
    recover_class,
    run_gesture,
    run_vitals,
    safe_ratio,
    slot_index,
    slot_permutation,
    training_index,
    unpack_doppler,
    unpack_vital,
    vitals_from_scalars,
    vitals_plan,
    zero_cube_like,
)
from oblivdsp.synth import generate_cube, random_gesture_spec, vitals_fixture_spec
from oblivdsp.vm import DepthBudgetError, trace_equals

VITALS_SUMS = [1, 2, 3, 4, 7, 8, 9, 10, 11]
GESTURE_SUMS = [1, 2, 3, 5, 6, 6, 8, 10, 11]
G_SHAPE = (4, 2, 4, 8)
G_DIMS = (64, 32, 16, 5)


@pytest.fixture(scope="module")
def sim():
    return make_session("exactsim", CkksParams.desk())


@pytest.fixture(scope="module")
def fixture_cube():
    return generate_cube(vitals_fixture_spec(), seed=7)


@pytest.fixture(scope="module")
def vitals_run(sim, fixture_cube):
    return run_vitals(fixture_cube, VitalsConfig(), sim)


@pytest.fixture(scope="module")
def gesture_setup():
    rng = np.random.default_rng(5)
    cubes = [generate_cube(random_gesture_spec(rng, 2, 4, 8, 4), seed=i) for i in range(20)]
    feats = np.array([O.plain_gesture_features(client_preprocess(c, "gesture")) for c in cubes])
    layers = O.calibrated_random_mlp(feats, G_DIMS, seed=0)
    cfg = GestureConfig(fc_dims=G_DIMS)
    return cubes, layers, cfg


# preprocessing and packing ---------------------------------------------


def test_static_scene_is_removed():
    cube = RadarCube(np.full((5, 1, 4, 2), 0.7 + 0.2j), 20.0, 0.005)
    assert np.all(client_preprocess(cube, "vital") == 0)
    assert np.all(client_preprocess(cube, "gesture") == 0)


def test_clutter_removal_keeps_ac_part(rng):
    z = np.full((16, 1, 4, 1), 2.0 + 0j)
    ac = np.exp(1j * np.linspace(0, 3, 16))
    z[:, 0, 2, 0] += ac
    out = client_preprocess(RadarCube(z, 20.0, 0.005), "vital")
    want = ac - ac.mean()
    assert np.allclose(out[:, 2], want / np.abs(want))  # one active bin: its own scale


def test_normalization_peaks(rng):
    cube = RadarCube(rng.normal(size=(6, 2, 4, 8)) + 1j * rng.normal(size=(6, 2, 4, 8)), 20.0, 0.005)
    v = client_preprocess(cube, "vital")
    assert np.allclose(np.abs(v).max(axis=1), 1.0)
    g = client_preprocess(cube, "gesture")
    assert np.abs(g).max() == pytest.approx(1.0)


def test_preprocess_errors():
    cube = zero_cube_like((3, 1, 2, 1))
    with pytest.raises(ValueError):
        client_preprocess(cube, "vital", antenna=2)
    with pytest.raises(ValueError):
        client_preprocess(cube, "other")


def test_doppler_packing_slot_count():
    re, _ = pack_doppler(np.zeros((1, 3, 16, 32), complex), 2048)
    assert re.shape[1] == 1536
    with pytest.raises(CapacityError):
        pack_doppler(np.zeros((1, 3, 16, 32), complex), 1024)


def test_vital_packing_layout():
    z = np.array([[1 + 2j, 3 - 1j, -2 + 0j, 0.5j]])
    re, im = pack_vital(z, 8)
    assert np.array_equal(re[0], [1, 3, -2, 0])
    assert np.array_equal(im[0], [2, -1, 0, 0.5])
    with pytest.raises(CapacityError):
        pack_vital(np.zeros((1, 9), complex), 8)


def test_pack_roundtrip(rng):
    z = rng.normal(size=(3, 2, 4, 8)) + 1j * rng.normal(size=(3, 2, 4, 8))
    assert np.array_equal(unpack_doppler(*pack_doppler(z, 128), z.shape), z)
    v = z[:, 0, :, 0]
    assert np.array_equal(unpack_vital(*pack_vital(v, 128), 4), v)


def test_slot_permutation_matches_index_helpers():
    a, r, d = 2, 3, 4
    perm = slot_permutation(a, r, d)
    for ai in range(a):
        for ri in range(r):
            for di in range(d):
                assert perm[slot_index(ai, ri, di, (a, r, d))] == training_index(ai, ri, di, (a, r, d))


# vitals ----------------------------------------------------------------


def test_vitals_ledger(vitals_run):
    assert [row.cumulative for row in vitals_run.ledger] == VITALS_SUMS
    text = format_ledger(vitals_run.ledger)
    assert len(text.splitlines()) == 10


def test_vitals_order1_ledger(sim):
    cfg = Config()
    cfg.vitals.taylor_order = 1
    run = dry_run("vitals", cfg, (200, 1, 16, 1), 20.0, CkksParams.desk())
    assert run.ledger[-1].cumulative == 9


def test_vitals_fixture_result(vitals_run):
    res = vitals_run.result
    assert 11.5 <= res.target_bin <= 12.5
    assert abs(res.rr_bpm - 15) <= 3
    assert abs(res.hr_bpm - 72) <= 6
    assert not res.low_confidence


def test_vitals_matches_plain_pipeline(sim, vitals_run, fixture_cube):
    v = VitalsConfig()
    plan = vitals_run.plan
    frames = client_preprocess(fixture_cube, "vital")
    branches = [(b.taps, ("resp", "heart")) for b in plan.branches]
    pv = O.plain_vitals_pipeline(frames, 20.0, branches, v.gamma, v.p_phi, v.taylor_order,
                                 v.taylor_form, v.resp_band, v.heart_band, v.spectrum_gain)
    res = vitals_run.result
    assert res.numerator == pytest.approx(pv.numerator, rel=1e-9)
    assert res.denominator == pytest.approx(pv.denominator, rel=1e-9)
    want = 60 * pv.rate_num / pv.rate_den
    assert res.rr_bpm == pytest.approx(want[0], rel=1e-9)
    assert res.hr_bpm == pytest.approx(want[1], rel=1e-9)
    probes = decrypt_probes(sim.client, vitals_run.outputs, sim.params.max_level)
    for name in ("K1", "K2", "K4", "K5", "K7"):
        val, _ = probes[name]
        assert np.abs(val - pv.stages[name]).max() <= 1e-9 * max(1.0, np.abs(pv.stages[name]).max())


def test_vitals_zero_scene_low_confidence(sim):
    cube = zero_cube_like((200, 1, 16, 1))
    run = run_vitals(cube, VitalsConfig(), sim)
    assert run.result.low_confidence
    assert run.result.target_bin is None


def test_vitals_trace_equals_dry_run(vitals_run):
    dr = dry_run("vitals", Config(), (200, 1, 16, 1), 20.0, CkksParams.desk())
    assert trace_equals(dr.trace, vitals_run.trace) == (True, None)
    assert dr.ledger == vitals_run.ledger


def test_vitals_depth_violation_names_stage(fixture_cube):
    small = make_session("exactsim", CkksParams.desk(depth=9))
    with pytest.raises(DepthBudgetError) as err:
        run_vitals(fixture_cube, VitalsConfig(), small)
    assert err.value.stage is not None


def test_vitals_band_mode(sim, fixture_cube):
    # per-band filtering of raw I/Q strips most of the carrier, so only the
    # layout and depth are checked here; the default lowpass mode is accurate
    run = run_vitals(fixture_cube, VitalsConfig(iq_filter="bands"), sim)
    assert [row.cumulative for row in run.ledger] == VITALS_SUMS
    assert len(run.plan.branches) == 2
    assert run.result.target_bin == pytest.approx(12, abs=0.5)


def test_vitals_plan_capacity():
    with pytest.raises(CapacityError):
        vitals_plan(VitalsConfig(), 10, 16, 20.0, 2048)


# recovery --------------------------------------------------------------


def test_recovery_division():
    assert safe_ratio(24.0, 2.0, 1e-6) == 12.0
    assert safe_ratio(1.0, 0.0, 1e-6) is None


def test_recovery_scalar_path(vitals_run):
    plan = vitals_run.plan
    res = vitals_from_scalars(24.0, 2.0, [3.0, 6.0], [12.0, 6.0], plan, VitalsConfig())
    assert res.target_bin == 12.0
    assert res.rr_bpm == 15.0 and res.hr_bpm == 60.0


def test_class_argmax_ties_low():
    class Dummy:
        def decrypt(self, handle, length):
            return np.array([0.1, 0.9, 0.3, 0.9])

    class Out:
        logits = type("V", (), {"handle": None, "length": 4})()

    res = recover_class(Dummy(), Out())
    assert res.predicted == 1


# gesture ---------------------------------------------------------------


def test_gesture_ledger_and_agreement(sim, gesture_setup):
    cubes, layers, cfg = gesture_setup
    for cube in cubes[:5]:
        run = run_gesture(cube, cfg, layers, sim)
        assert [row.cumulative for row in run.ledger] == GESTURE_SUMS
        ref = O.plain_gesture_logits(client_preprocess(cube, "gesture"), layers)
        assert np.abs(run.result.logits - ref).max() < 1e-9 * max(1, np.abs(ref).max())
        assert run.result.predicted == int(np.argmax(ref))


def test_gesture_zero_cube_gives_bias_chain(sim, gesture_setup):
    _, layers, cfg = gesture_setup
    run = run_gesture(zero_cube_like(G_SHAPE), cfg, layers, sim)
    assert np.abs(run.result.logits - O.kernel_fc(np.zeros(G_DIMS[0]), layers)).max() < 1e-9


def test_gesture_default_ledger():
    cfg = Config()
    layers = [(np.zeros((32, 1536)), np.zeros(32)), (np.zeros((16, 32)), np.zeros(16)), (np.zeros((5, 16)), np.zeros(5))]
    run = dry_run("gesture", cfg, (2, 3, 16, 32), 33.0, CkksParams.desk(), layers)
    assert [row.cumulative for row in run.ledger] == GESTURE_SUMS


def test_gesture_traces_are_oblivious(sim, gesture_setup):
    cubes, layers, cfg = gesture_setup
    traces = [run_gesture(c, cfg, layers, sim).trace for c in cubes[:4]]
    assert all(trace_equals(traces[0], t) == (True, None) for t in traces[1:])


def test_fold_weights_dimension_checks():
    with pytest.raises(ValueError):
        fold_fc_weights([(np.zeros((4, 10)), np.zeros(4))], 2, 4, 8, 4)
    with pytest.raises(ValueError):
        fold_fc_weights([(np.zeros((4, 64)), np.zeros(4)), (np.zeros((2, 5)), np.zeros(2))], 2, 4, 8, 4)


def test_fold_weights_equals_permuted_average(rng):
    a, r, d, f = 2, 4, 8, 4
    w = rng.normal(size=(3, a * r * d))
    folded = fold_fc_weights([(w, np.zeros(3))], a, r, d, f)[0][0]
    slots = rng.normal(size=a * r * d)
    training = np.empty_like(slots)
    training[slot_permutation(a, r, d)] = slots
    assert np.allclose(folded @ (f * slots), w @ training)


def test_gesture_plan_rejects_bad_chirps(gesture_setup):
    _, layers, cfg = gesture_setup
    with pytest.raises(ValueError):
        gesture_plan(cfg, (4, 2, 4, 6), 2048, layers)


# ckks end to end at toy size ------------------------------------------


def test_vitals_on_ckks_small():
    params = CkksParams.desk(n=1024, depth=11)
    spec = vitals_fixture_spec()
    spec.frames = 128
    cube = generate_cube(spec, seed=3)
    cfg = Config()
    dr = dry_run("vitals", cfg, cube.shape, cube.frame_rate, params)
    enc = run_vitals(cube, cfg.vitals, make_session("ckks", params, dr.trace.rotations(), seed=1))
    ref = run_vitals(cube, cfg.vitals, make_session("exactsim", params))
    assert trace_equals(enc.trace, ref.trace) == (True, None)
    assert abs(enc.result.rr_bpm - ref.result.rr_bpm) < 1e-3
    assert abs(enc.result.hr_bpm - ref.result.hr_bpm) < 1e-3
    assert enc.result.target_bin == pytest.approx(ref.result.target_bin, abs=1e-4)


def test_outputs_type(vitals_run):
    assert isinstance(vitals_run.outputs, VitalsOutputs)
    rep = vitals_run.report("abc")
    assert rep["config_digest"] == "abc"
    assert [p["name"] for p in rep["decrypt_points"]] == ["target (N, Dn)", "rate (Nf, Df)"]
