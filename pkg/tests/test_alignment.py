import numpy as np
import pytest

from aligncruse.alignment import (
    DelayEstimate,
    OnlineDelayEstimator,
    apply_delay,
    global_delay,
    online_delay,
)
from aligncruse.data import speech_surrogate
from aligncruse.dsp import AudioClip
from aligncruse.errors import ConfigurationError, NoSignalError


def surrogate(seed, seconds=3.0):
    rng = np.random.default_rng(seed)
    return speech_surrogate(int(seconds * 16000), rng)


def shift(x, d):
    return np.concatenate([np.zeros(d), x[: len(x) - d]])


# -- global -----------------------------------------------------------------

def test_global_identical_signals():
    x = surrogate(0)
    est = global_delay(AudioClip(x), AudioClip(x), max_delay=8000)
    assert est.delay == 0
    assert abs(est.confidence - 1.0) < 1e-9


def test_global_exact_recovery_4800():
    far = surrogate(1)
    mic = shift(far, 4800)
    est = global_delay(AudioClip(mic), AudioClip(far))
    assert est.delay == 4800
    assert abs(est.confidence - 1.0) < 1e-9


@pytest.mark.parametrize("d", [0, 1, 160, 7321, 16000])
def test_global_exact_recovery_range(d):
    far = surrogate(2, seconds=3.0)
    mic = shift(far, d)
    est = global_delay(AudioClip(mic), AudioClip(far))
    assert est.delay == d


def test_global_noisy_monte_carlo():
    hits = 0
    for seed in range(100):
        rng = np.random.default_rng(10_000 + seed)
        far = speech_surrogate(3 * 16000, rng)
        clean = 0.5 * shift(far, 8000)
        noise = rng.standard_normal(len(far))
        noise *= np.sqrt(np.sum(clean**2) / (np.sum(noise**2) * 10.0**2))  # 20 dB SNR
        est = global_delay(AudioClip(clean + noise), AudioClip(far))
        if est.delay == 8000 and est.confidence > 0.4:
            hits += 1
    assert hits >= 99


def test_global_silent_far_raises():
    with pytest.raises(NoSignalError):
        global_delay(AudioClip(surrogate(3)), AudioClip(np.zeros(48000)))


def test_global_max_delay_validation():
    x = surrogate(4)
    with pytest.raises(ConfigurationError):
        global_delay(AudioClip(x), AudioClip(x), max_delay=20000)


def test_global_fft_matches_direct_correlation():
    rng = np.random.default_rng(8)
    mic = rng.standard_normal(400)
    far = rng.standard_normal(400)
    from aligncruse.alignment import _ncc_curve

    ncc = _ncc_curve(mic, far, 50)
    for d in range(51):
        num = np.dot(mic[d:], far[: 400 - d])
        den = np.linalg.norm(mic[d:]) * np.linalg.norm(far[: 400 - d])
        np.testing.assert_allclose(ncc[d], num / den, atol=1e-9)


def test_confidence_bounds():
    rng = np.random.default_rng(12)
    mic = rng.standard_normal(32000)
    far = rng.standard_normal(32000)
    est = global_delay(AudioClip(mic), AudioClip(far), max_delay=16000)
    assert -1.0 - 1e-9 <= est.confidence <= 1.0 + 1e-9


# -- online -------------------------------------------------------------------

def test_online_converges_to_half_second_delay():
    far = surrogate(20, seconds=6.0)
    mic = shift(far, 8000)
    est = OnlineDelayEstimator(max_delay=16000)
    results = []
    for k in range(0, len(far) - 160 + 1, 160):
        results.append(est.push(mic[k : k + 160], far[k : k + 160]))
    # converged within 3 s, then stays within one frame of the truth
    settled = [r.delay for r in results[300:]]
    assert all(abs(d - 8000) <= 160 for d in settled)
    assert any(abs(r.delay - 8000) <= 160 for r in results[: 300])


def test_online_step_change_reaches_new_delay():
    far = surrogate(21, seconds=12.0)
    n = len(far)
    half = n // 2
    mic = np.concatenate([shift(far, 4800)[:half], shift(far, 9600)[half:]])
    est = OnlineDelayEstimator(max_delay=16000)
    results = []
    for k in range(0, n - 160 + 1, 160):
        results.append(est.push(mic[k : k + 160], far[k : k + 160]))
    before = results[half // 160 - 5].delay
    assert abs(before - 4800) <= 160
    # within 4 s of the change the estimate has moved to the new value
    after_idx = half // 160 + 400
    assert abs(results[after_idx].delay - 9600) <= 160


def test_online_silence_holds_estimate_and_decays_confidence():
    far = surrogate(22, seconds=4.0)
    mic = shift(far, 3200)
    est = OnlineDelayEstimator(max_delay=8000)
    last = None
    for k in range(0, len(far) - 160 + 1, 160):
        last = est.push(mic[k : k + 160], far[k : k + 160])
    held_delay, held_conf = last.delay, last.confidence
    confs = []
    for _ in range(10):
        r = est.push(np.zeros(160), np.zeros(160))
        assert r.delay == held_delay
        confs.append(r.confidence)
    assert all(c2 < c1 for c1, c2 in zip([held_conf] + confs[:-1], confs))


def test_online_warming_up():
    est = OnlineDelayEstimator()
    r = est.push(np.ones(160), np.ones(160))
    assert r.confidence == 0.0


def test_online_causality():
    far = surrogate(23, seconds=4.0)
    mic = shift(far, 1600)
    k_stop = 200
    futures = [np.random.default_rng(s).standard_normal(len(far)) for s in (1, 2)]
    traces = []
    for fut in futures:
        m = mic.copy()
        f = far.copy()
        m[k_stop * 160 :] = fut[k_stop * 160 :]
        f[k_stop * 160 :] = fut[k_stop * 160 :][::-1]
        est = OnlineDelayEstimator(max_delay=8000)
        for k in range(0, len(far) - 160 + 1, 160):
            est.push(m[k : k + 160], f[k : k + 160])
        traces.append(est.trace[:k_stop])
    assert traces[0] == traces[1]


def test_online_wrapper_returns_trace():
    far = surrogate(24, seconds=2.0)
    mic = shift(far, 800)
    est = online_delay(AudioClip(mic), AudioClip(far), max_delay=4000)
    assert isinstance(est, DelayEstimate)
    assert len(est.per_frame) == len(far) // 160


# -- apply_delay ---------------------------------------------------------------

def test_apply_delay_zero_identity():
    x = surrogate(30, seconds=1.0)
    out = apply_delay(AudioClip(x), 0)
    assert np.array_equal(out.samples, x)


def test_apply_delay_impulse():
    x = np.zeros(1000)
    x[0] = 1.0
    out = apply_delay(AudioClip(x), 160)
    assert out.samples[160] == 1.0
    assert np.sum(out.samples != 0) == 1
    assert len(out) == 1000


def test_apply_delay_round_trip_with_global():
    far = surrogate(31, seconds=2.0)
    mic = apply_delay(AudioClip(far), 5000)
    est = global_delay(mic, AudioClip(far), max_delay=8000)
    assert est.delay == 5000


def test_apply_delay_beyond_length_warns():
    with pytest.warns(UserWarning):
        out = apply_delay(AudioClip(np.ones(100)), 200)
    assert np.all(out.samples == 0)


def test_apply_delay_negative_rejected():
    with pytest.raises(ConfigurationError):
        apply_delay(AudioClip(np.ones(10)), -1)
