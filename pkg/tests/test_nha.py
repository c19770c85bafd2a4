import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hyfal.diffsim import AffineKnown
from hyfal.hybrid import chasing_cars, chasing_cars_inputs, execute
from hyfal.nha import (N_RESAMPLE, ModeEncoder, NhaSurrogate, Recording, SegmentationError,
                       SurrogateLayout, TrainConfig, TrainingDivergence, chasing_cars_layout,
                       detect_change_points, encode, fit_guards, nha_loss, segment_trajectory, train)

from synthetic import pruning_run, sawtooth_runs, sawtooth_surrogate


def recording(times, states, segment=5.0):
    times = np.asarray(times, float)
    states = np.asarray(states, float).reshape(times.size, -1)
    K = int(np.ceil(times[-1] / segment))
    return Recording(times, states, np.zeros((K, 1)), segment)


# --- segmentation ------------------------------------------------------------

def test_observer_cuts():
    t = np.linspace(0, 10, 101)
    rec = recording(t, np.random.default_rng(0).normal(size=(101, 2)))
    segs = segment_trajectory(rec, [3.0, 7.5])
    assert [(s.t0, s.t1) for s in segs] == [(0.0, 3.0), (3.0, 7.5), (7.5, 10.0)]
    assert segs[1].times[0] == 3.0 and segs[1].times[-1] == 7.5


def test_switch_states_used_at_cuts():
    t = np.linspace(0, 10, 11)
    rec = recording(t, t)
    segs = segment_trajectory(rec, [2.5], switch_states=[[42.0]])
    assert segs[0].states[-1, 0] == 42.0 and segs[1].states[0, 0] == 42.0


@pytest.mark.parametrize("noise", [0.0, 1e-4])
def test_detector_finds_slope_change(noise):
    t = np.linspace(0, 10, 101)
    x = np.where(t < 5, t, 5 + 3 * (t - 5)) + noise * np.random.default_rng(1).normal(size=101)
    cuts = detect_change_points(t, x)
    assert cuts.size == 1 and abs(cuts[0] - 5.0) <= 2 * 0.1 + 1e-12


def test_constant_signal_single_segment():
    t = np.linspace(0, 10, 50)
    segs = segment_trajectory(recording(t, np.full(50, 3.0)))
    assert len(segs) == 1 and (segs[0].t0, segs[0].t1) == (0.0, 10.0)


def test_too_short():
    with pytest.raises(SegmentationError):
        segment_trajectory(recording([0.0, 1.0, 2.0], [0.0, 1.0, 2.0]), [])
    with pytest.raises(SegmentationError):
        detect_change_points([0.0, 1.0, 2.0], [0.0, 1.0, 0.0])


@pytest.mark.parametrize("cuts", [[5.0, 3.0], [0.0], [10.0], [3.0, 3.0]])
def test_bad_switch_times(cuts):
    t = np.linspace(0, 10, 21)
    with pytest.raises(SegmentationError):
        segment_trajectory(recording(t, t), cuts)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 9.99), max_size=8, unique=True), st.integers(4, 80))
def test_segments_tile_span(cuts, n):
    t = np.linspace(0, 10, n)
    segs = segment_trajectory(recording(t, np.sin(t)), sorted(cuts))
    assert segs[0].t0 == 0.0 and segs[-1].t1 == 10.0
    for a, b in zip(segs, segs[1:]):
        assert a.t1 == b.t0 and a.t0 < a.t1
    for s in segs:
        assert np.all(np.diff(s.times) >= 0) and s.times[0] == s.t0 and s.times[-1] == s.t1


def test_features_fixed_length():
    t = np.linspace(0, 10, 101)
    for cuts in ([], [1.0], [2.0, 2.3, 9.0]):
        segs = segment_trajectory(recording(t, np.c_[t, t ** 2]), cuts)
        assert {s.features.size for s in segs} == {2 * N_RESAMPLE + 2 * (N_RESAMPLE - 1) + 1}


# --- encoder ----------------------------------------------------------------

def test_zero_encoder_uniform():
    p, q = encode(ModeEncoder.zeros(5, 3), np.ones(5))
    assert np.allclose(p, 1 / 3, atol=1e-15) and q == 0


def test_softmax_example():
    enc = ModeEncoder.zeros(5, 3)
    enc.bank.b[-1][0] = [2.0, -1.0, -1.0]
    p, q = encode(enc, np.zeros(5))
    z = np.exp([2.0, -1.0, -1.0])
    assert np.allclose(p, z / z.sum(), rtol=1e-14, atol=0) and q == 0
    assert np.allclose(p, [0.905, 0.047, 0.047], atol=5e-3)


def test_tie_breaks_to_lowest():
    enc = ModeEncoder.zeros(5, 3)
    enc.bank.b[-1][0] = [1.0, 3.0, 3.0]
    assert encode(enc, np.zeros(5))[1] == 1


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1e4))
def test_probabilities_on_simplex(seed, scale):
    rng = np.random.default_rng(seed)
    enc = ModeEncoder(6, 4, rng=rng)
    enc.bank.b[-1][0] = rng.normal(0, scale, 4)
    P = enc.probs(rng.normal(0, scale + 1, (20, 6)))
    assert np.all(P >= 0) and np.all(np.abs(P.sum(axis=1) - 1) <= 1e-12)


# --- loss ---------------------------------------------------------------------

def exact_surrogate(seed=0):
    """Known terms reproduce the sawtooth; the encoder tells rising from falling."""
    sur = sawtooth_surrogate(seed)
    bank = sur.banks["main"]
    for W in bank.W:
        W[:] = 0.0
    for b in bank.b:
        b[:] = 0.0
    sur.known["main"] = [AffineKnown(np.zeros((1, 1)), np.ones((1, 1)), np.ones(1)),
                         AffineKnown(np.zeros((1, 1)), -np.ones((1, 1)), -np.ones(1)), None]
    enc = sur.encoders["main"].bank
    for W in enc.W:
        W[:] = 0.0
    for b in enc.b:
        b[:] = 0.0
    enc.W[0][0][N_RESAMPLE, 0] = 1.0          # first rate of change
    enc.W[1][0][0] = [1000.0, -1000.0, 0.0]
    enc.b[1][0] = [0.0, 0.0, -2000.0]
    return sur


def test_exact_surrogate_zero_loss():
    sur = exact_surrogate()
    segs = sur.buffer[0].segments["main"]
    P, hard = sur.hard_modes("main", segs)
    assert set(hard) == {0, 1} and np.all(P.max(axis=1) == 1.0)
    terms = nha_loss(sur, segs, 0.1)
    assert np.all(terms.separation == 0.0)
    assert terms.total < 1e-20


def test_identical_probs_penalty():
    sur = exact_surrogate()
    enc = sur.encoders["main"].bank
    enc.W[1][:] = 0.0
    enc.b[1][0] = [1000.0, 0.0, 0.0]
    segs = sur.buffer[0].segments["main"]
    terms = nha_loss(sur, segs, 0.1, lambda_sep=0.1)
    assert terms.separation[0] == pytest.approx(0.1, abs=1e-15)
    assert terms.separation[-1] == 0.0


def _rk4_mse(sur, seg, q, step, phi, seg_len):
    """Integrate one segment from its first sample and score every later sample."""
    net = sur.banks["main"].net(q)

    def f(x, t0, t):
        k = min(int(np.floor(t0 / seg_len + 1e-9)), len(phi) - 1)
        return net(np.concatenate([x, phi[k], [t]])[None])[0]

    ts, xs = seg.times, seg.states
    keep = np.concatenate([[0], np.flatnonzero(np.diff(ts) > 1e-12) + 1])
    ts, xs = ts[keep], xs[keep]
    x, err = xs[0].copy(), []
    for j in range(ts.size - 1):
        nsub = max(1, int(np.ceil((ts[j + 1] - ts[j]) / step - 1e-9)))
        h = (ts[j + 1] - ts[j]) / nsub
        for r in range(nsub):
            t = ts[j] + r * h
            k1 = f(x, t, t)
            k2 = f(x + h / 2 * k1, t, t + h / 2)
            k3 = f(x + h / 2 * k2, t, t + h / 2)
            k4 = f(x + h * k3, t, t + h)
            x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        err.append(np.mean((x - xs[j + 1]) ** 2))
    return float(np.mean(err))


@pytest.mark.parametrize("seed", [0, 1])
def test_loss_matches_independent_recomputation(seed):
    sur = sawtooth_surrogate(seed)
    entry = sur.buffer[0]
    segs = entry.segments["main"]
    phi = entry.rec.input_segments
    terms = nha_loss(sur, segs, 0.1, lambda_sep=0.3)
    P = sur.encoders["main"].probs(np.stack([s.features for s in segs]))
    for i, s in enumerate(segs):
        ref = _rk4_mse(sur, s, int(np.argmax(P[i])), 0.1, phi, 5.0)
        assert terms.reconstruction[i] == pytest.approx(ref, rel=1e-9, abs=1e-14)
    pen = 0.3 * np.sum(P[:-1] * P[1:], axis=1)
    assert np.allclose(terms.separation[:-1], pen, rtol=1e-12) and terms.separation[-1] == 0.0
    assert abs(terms.total - terms.reconstruction.sum() - terms.separation.sum()) < 1e-10


# --- training -------------------------------------------------------------------

def test_pruning_on_two_mode_system():
    owners = []
    for seed in range(5):
        usage, loss = pruning_run(seed)
        assert loss[-1] < 0.1 * loss[0]
        owners.append(int(np.count_nonzero(usage)))
    assert all(k >= 2 for k in owners)
    assert sum(k <= 2 for k in owners) >= 4


def test_reconstruction_only_single_segment():
    lay = SurrogateLayout.single(1, 1, 3, 2.0, 0.5, hidden=(8,))
    sur = NhaSurrogate(lay, seed=0)
    tr = sawtooth_runs(np.random.default_rng(0), 1, horizon=2.0)[0]
    assert not tr.events
    sur.add_trajectory(tr)
    segs = sur.segments()
    before = nha_loss(sur, segs, 0.1, lambda_sep=0.0)
    train(sur, TrainConfig(epochs=60, lambda_sep=0.0))
    after = nha_loss(sur, segs, 0.1, lambda_sep=0.0)
    assert len(segs) == 1 and after.separation[0] == 0.0
    assert after.total < 0.01 * before.total


def _flat(sur):
    return np.concatenate([sur.banks["main"].flat().ravel(), sur.encoders["main"].bank.flat().ravel()])


def test_training_deterministic():
    a, b = sawtooth_surrogate(3), sawtooth_surrogate(3)
    ra, rb = train(a, TrainConfig(epochs=20, seed=5)), train(b, TrainConfig(epochs=20, seed=5))
    assert ra.loss == rb.loss and np.array_equal(_flat(a), _flat(b))


def test_update_epochs_used_after_first_fit():
    sur = sawtooth_surrogate(0)
    cfg = TrainConfig(epochs=7, update_epochs=3)
    assert train(sur, cfg).epochs == 7
    assert train(sur, cfg).epochs == 3


def test_empty_buffer():
    with pytest.raises(ValueError):
        train(NhaSurrogate(SurrogateLayout.single(1, 1, 2, 20.0, 5.0)))


def test_divergence_reported():
    sur = sawtooth_surrogate(0)
    sur.known["main"] = [AffineKnown(np.array([[1e200]]))] * 3
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(TrainingDivergence, match="epoch"):
            train(sur, TrainConfig(epochs=5))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lambda_sep=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)


def test_buffer_keeps_latest():
    sur = sawtooth_surrogate(0, count=7, buffer_size=5)
    assert len(sur.buffer) == 5
    assert [e.traj_id for e in sur.buffer] == [2, 3, 4, 5, 6]
    assert sur.training_inputs.shape == (5, 4)


# --- composite surrogate ------------------------------------------------------------

@pytest.fixture(scope="module")
def chasing_surrogate():
    sur = NhaSurrogate(chasing_cars_layout(3), seed=0)
    rng = np.random.default_rng(0)
    for _ in range(3):
        sur.add_trajectory(execute(chasing_cars(), chasing_cars_inputs().sample(rng), 0.01))
    train(sur, TrainConfig(epochs=40))
    fit_guards(sur)
    return sur


def test_composite_shapes(chasing_surrogate):
    sur = chasing_surrogate
    assert sur.mode_counts == {"leader": 1, "follower": 3}
    lead = sur.segments("leader")
    assert len(lead) == 3 and all(s.duration == 100.0 for s in lead)
    foll = sur.segments("follower")
    assert len(lead) + len(foll) == len(sur.segments())
    assert {s.component for s in foll} == {"car2", "car3", "car4", "car5"}
    assert all(s.guard_states.shape[1] == 3 for s in foll)


def test_kernels_match_reference(chasing_surrogate):
    sur = chasing_surrogate
    phi = np.random.default_rng(1).uniform(0, 1, (4, 40))
    fast, fm = sur.rollout(phi, 0.25, fast=True)
    slow, sm = sur.rollout(phi, 0.25, fast=False)
    assert np.allclose(fast, slow, rtol=1e-10, atol=1e-10)
    assert np.array_equal(fm, sm)
    s1, _, pb1 = sur.rollout_vjp(phi[:1], 0.25, fast=True)
    s2, _, pb2 = sur.rollout_vjp(phi[:1], 0.25, fast=False)
    d = np.random.default_rng(2).normal(size=s1.shape)
    assert np.allclose(pb1(d), pb2(d), rtol=1e-9, atol=1e-12)


def test_json_roundtrip(chasing_surrogate):
    sur = chasing_surrogate
    back = NhaSurrogate.from_json(sur.to_json())
    phi = np.random.default_rng(3).uniform(0, 1, (2, 40))
    assert np.array_equal(back.rollout(phi, fast=False)[0], sur.rollout(phi, fast=False)[0])
    assert back.initial_modes == sur.initial_modes
    assert len(back.guards["follower"]) == len(sur.guards["follower"])
