import numpy as np
import pytest
from scipy.signal import butter, lfilter

from wavesense.frontend import (DEFAULT_GAIN, NYQUIST_GUARD, FilterDesignError, MixingError,
                                RasterFormatError, Waveform, apply_filterbank, bin_spikes,
                                calibrate_gain, design_filterbank, encode_spikes, hz_to_mel,
                                mix_noise, noise_scale, preprocess_waveform, read_raster, rectify,
                                standardize_length, write_raster)
from wavesense.neuron import SpikeRaster
from wavesense.signal import InvalidInputError

FS = 16000


@pytest.fixture(scope="module")
def bank():
    return design_filterbank()


def _sine(freq, seconds=0.5, amp=1.0, fs=FS):
    t = np.arange(int(seconds * fs)) / fs
    return amp * np.sin(2 * np.pi * freq * t)


def _rms(x):
    return float(np.sqrt(np.mean(np.square(x))))


def sine_gain_db(b, a, freq, fs=FS, seconds=0.5):
    x = _sine(freq, seconds, fs=fs)
    y = lfilter(b, a, x)
    half = x.size // 2
    return 20 * np.log10(_rms(y[half:]) / _rms(x[half:]))


class TestDesign:
    def test_matches_reference_butterworth(self, bank):
        nyq = FS / 2
        for i in range(len(bank)):
            lo, hi = bank.edges[i], min(bank.edges[i + 1], NYQUIST_GUARD * nyq)
            b_ref, a_ref = butter(1, [lo, hi], btype="bandpass", fs=FS)
            b, a = bank.ba(i)
            np.testing.assert_allclose(b, b_ref, atol=1e-12)
            np.testing.assert_allclose(a, a_ref, atol=1e-12)

    def test_centers(self, bank):
        assert len(bank) == 64
        c = bank.centers
        assert c[0] >= 100 and c[-1] <= 8000
        assert np.all(np.diff(c) > 0)
        steps = np.diff(hz_to_mel(c))
        assert np.max(np.abs(steps - steps.mean())) < 0.1

    def test_center_gain_by_sine(self, bank):
        gains = [sine_gain_db(*bank.ba(i), bank.centers[i]) for i in range(len(bank))]
        assert np.max(np.abs(gains)) <= 1.0

    def test_stable(self, bank):
        assert bank.is_stable()
        assert np.all(np.abs(bank.poles()) < 1)

    def test_single_band(self):
        one = design_filterbank(1, 100, 8000)
        assert len(one) == 1
        assert one.edges[0] == 100 and one.edges[-1] == 8000

    @pytest.mark.parametrize("args", [(64, 100, 9000), (64, 500, 100), (0, 100, 8000)])
    def test_infeasible(self, args):
        with pytest.raises(FilterDesignError):
            design_filterbank(*args)


class TestApply:
    def test_zero_input(self, bank):
        assert not np.any(apply_filterbank(Waveform(np.zeros(800)), bank))

    def test_center_sine_selectivity(self, bank):
        for i in range(0, 64, 3):
            out = apply_filterbank(Waveform(_sine(bank.centers[i], 0.3)), bank)
            rms = np.sqrt(np.mean(out[:, out.shape[1] // 2:] ** 2, axis=1))
            far = [j for j in range(64) if abs(j - i) >= 3]
            assert rms[i] > rms[far].max()

    def test_impulse_decays(self, bank):
        x = np.zeros(FS)
        x[0] = 1.0
        out = apply_filterbank(Waveform(x), bank)
        assert np.all(np.abs(out[:, -100:]) < 1e-6)
        b, a = bank.ba(10)
        np.testing.assert_allclose(out[10], lfilter(b, a, x), atol=1e-15)

    def test_rate_mismatch(self, bank):
        with pytest.raises(InvalidInputError):
            apply_filterbank(Waveform(np.zeros(10), 8000), bank)


def test_rectify():
    np.testing.assert_array_equal(rectify([-1, 2, -3]), [1, 2, 3])
    x = np.array([0.0, 0.5, 3.0])
    np.testing.assert_array_equal(rectify(x), x)
    s = _sine(440)
    assert _rms(rectify(s)) == pytest.approx(_rms(s), rel=1e-12)


class TestEncoder:
    def test_zero(self):
        assert not np.any(encode_spikes(np.zeros((2, 1000))))

    @pytest.mark.parametrize("c, gain", [(0.3, 540.0), (0.05, 1000.0), (1.0, 37.0)])
    def test_rate_law(self, c, gain):
        seconds = 2.0
        counts = encode_spikes(np.full((1, int(seconds * FS)), c), gain=gain)
        assert abs(counts.sum() - gain * c * seconds) <= 1

    def test_sequential_rule(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(0, 1, (3, 4000))
        gain, theta = 700.0, 0.7
        v = np.zeros(3)
        ref = np.zeros_like(x, dtype=np.int64)
        for n in range(x.shape[1]):
            v += gain * x[:, n] / FS
            k = np.floor(v / theta)
            ref[:, n] = k
            v -= k * theta
        got = encode_spikes(x, gain, theta)
        assert np.abs(got.sum(axis=1) - ref.sum(axis=1)).max() <= 1

    def test_gain_doubling(self):
        x = rectify(np.random.default_rng(1).normal(size=(8, 16000)) * 0.3)
        a = encode_spikes(x, 300).sum(axis=1)
        b = encode_spikes(x, 600).sum(axis=1)
        assert np.all(np.abs(b - 2 * a) <= 1)

    def test_rejects_negative(self):
        with pytest.raises(InvalidInputError):
            encode_spikes(np.array([[-0.1, 0.2]]))


class TestBinning:
    def test_five_seconds(self):
        r = bin_spikes(np.zeros((64, 5 * FS), dtype=int))
        assert r.counts.shape == (64, 500)

    def test_conservation(self):
        ev = np.random.default_rng(2).poisson(0.05, (4, 12345))
        r = bin_spikes(ev)
        assert r.counts.sum() == ev.sum()
        assert r.counts.shape[1] == 78

    def test_two_in_one_window(self):
        ev = np.zeros((1, 320), dtype=int)
        ev[0, 10] = ev[0, 150] = 1
        np.testing.assert_array_equal(bin_spikes(ev).counts, [[2, 0]])


class TestMixing:
    def test_equal_rms_zero_db(self):
        rng = np.random.default_rng(3)
        s = rng.uniform(-0.5, 0.5, 8000)
        n = rng.uniform(-0.5, 0.5, 8000)
        n *= _rms(s) / _rms(n)
        assert noise_scale(Waveform(s), Waveform(n), 0.0) == pytest.approx(1.0, abs=1e-6)

    def test_measured_snr(self):
        rng = np.random.default_rng(4)
        s = Waveform(0.3 * _sine(500, 1.0))
        n = Waveform(rng.uniform(-1, 1, 5000))
        mixed = mix_noise(s, n, 5.0).samples
        looped = np.tile(n.samples, 4)[:s.samples.size]
        # mixed = p*s + q*noise; a uniform peak rescale leaves the ratio intact
        (p, q), *_ = np.linalg.lstsq(np.stack([s.samples, looped], axis=1), mixed, rcond=None)
        np.testing.assert_allclose(p * s.samples + q * looped, mixed, atol=1e-12)
        snr = 20 * np.log10(_rms(p * s.samples) / _rms(q * looped))
        assert snr == pytest.approx(5.0, abs=0.01)
        assert np.max(np.abs(mixed)) <= 1.0

    def test_infinite_snr(self):
        s = Waveform(0.4 * _sine(300, 0.1))
        out = mix_noise(s, Waveform(np.full(100, 0.2)), float("inf"))
        np.testing.assert_array_equal(out.samples, s.samples)

    def test_silent_signal(self):
        with pytest.raises(MixingError):
            mix_noise(Waveform(np.zeros(100)), Waveform(np.ones(100) * 0.1))


class TestLength:
    def test_pad(self):
        w = Waveform(np.full(3 * FS, 0.1))
        out = standardize_length(w, 5)
        assert out.samples.size == 80000
        assert out.samples[FS] == 0.1 and out.samples[0] == 0

    def test_exact_unchanged(self):
        w = Waveform(np.zeros(5 * FS))
        assert standardize_length(w, 5) is w

    def test_crop_center(self):
        x = np.linspace(-1, 1, 7 * FS)
        out = standardize_length(Waveform(x), 5)
        np.testing.assert_array_equal(out.samples, x[FS:6 * FS])


def test_waveform_validation():
    with pytest.raises(InvalidInputError):
        Waveform(np.array([0.0, 1.5]))
    with pytest.raises(InvalidInputError):
        Waveform(np.zeros((2, 3)))


def test_raster_roundtrip(tmp_path):
    counts = np.random.default_rng(5).poisson(2, (64, 37))
    write_raster(tmp_path / "a.wsras", SpikeRaster(counts, 0.01))
    back = read_raster(tmp_path / "a.wsras")
    assert np.array_equal(back.counts, counts) and back.dt == 0.01
    data = (tmp_path / "a.wsras").read_bytes()
    assert data[:6] == b"WSRAS1"
    (tmp_path / "b.wsras").write_bytes(data[:-2])
    with pytest.raises(RasterFormatError):
        read_raster(tmp_path / "b.wsras")


class TestPipeline:
    def test_deterministic_and_shape(self, bank):
        w = Waveform(0.5 * _sine(1000, 1.3))
        a = preprocess_waveform(w, bank)
        b = preprocess_waveform(w, bank)
        assert a.counts.shape == (64, 500)
        assert np.array_equal(a.counts, b.counts)
        assert a.counts.sum() > 0

    def test_silence(self, bank):
        r = preprocess_waveform(Waveform(np.zeros(FS)), bank)
        assert not np.any(r.counts)

    def test_amplitude_monotone(self, bank):
        x = Waveform(0.2 * np.random.default_rng(6).uniform(-1, 1, FS // 2))
        low = rectify(apply_filterbank(x, bank))
        high = rectify(apply_filterbank(Waveform(2 * x.samples), bank))
        assert np.all(encode_spikes(high).sum(axis=1) >= encode_spikes(low).sum(axis=1))

    def test_calibration(self, bank):
        gain = calibrate_gain(bank)
        assert abs(gain - DEFAULT_GAIN) / gain < 0.01
        y = rectify(apply_filterbank(Waveform(_sine(1000, 1.0)), bank))
        rate = encode_spikes(y, DEFAULT_GAIN).sum(axis=1).max()
        assert 290 <= rate <= 310
