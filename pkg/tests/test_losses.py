import math

import numpy as np
import pytest

from wavesense import autodiff as ad
from wavesense.losses import (DEFAULT_ALPHA, activity_excess, activity_loss, batch_loss,
                              cross_entropy, peak_logits, peak_op, total_loss)
from wavesense.network import OutputTrace
from wavesense.signal import InvalidInputError


def test_peak_logits_hand_case():
    r = peak_logits(np.array([[1, 3, 2], [0, 0, 5]]))
    np.testing.assert_array_equal(r.logits, [3, 5])
    np.testing.assert_array_equal(r.peak_times, [1, 2])


def test_peak_logits_constant_tie():
    r = peak_logits(np.full((3, 6), 2.5))
    np.testing.assert_array_equal(r.logits, 2.5)
    np.testing.assert_array_equal(r.peak_times, 0)


def test_peak_logits_bumps():
    t = np.arange(200)
    trace = np.stack([np.exp(-((t - 60) / 10.0) ** 2), 0.7 * np.exp(-((t - 140) / 15.0) ** 2)])
    r = peak_logits(OutputTrace(trace))
    np.testing.assert_array_equal(r.peak_times, [60, 140])


def test_peak_logits_empty():
    with pytest.raises(InvalidInputError):
        peak_logits(np.zeros((2, 0)))


class TestCrossEntropy:
    def test_uniform(self):
        assert cross_entropy([0, 0], 0) == pytest.approx(math.log(2), abs=1e-6)

    def test_confident(self):
        assert cross_entropy([50, -50], 0) < 1e-9
        assert cross_entropy([50, -50], 1) == pytest.approx(100, rel=1e-9)

    def test_label_range(self):
        with pytest.raises(InvalidInputError):
            cross_entropy([0, 0], 2)

    def test_non_negative(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            z = rng.normal(scale=5, size=4)
            assert cross_entropy(z, int(rng.integers(4))) >= 0


class TestActivity:
    def test_hand_case(self):
        assert activity_excess([np.array([[0, 1, 2, 3]])]) == 5

    def test_ones_free(self):
        assert activity_excess([np.ones((4, 9), dtype=int)]) == 0

    def test_all_twos(self):
        assert activity_excess([np.full((10, 10), 2)]) == 200

    def test_permutation_invariant(self):
        rng = np.random.default_rng(1)
        r = rng.integers(0, 4, (8, 12))
        shuffled = rng.permutation(rng.permutation(r, axis=0), axis=1)
        assert activity_excess([r]) == activity_excess([shuffled])

    def test_loss_values(self):
        assert activity_loss(5, 4, 1) == 1.5625
        assert activity_loss(0, 4, 3) == 0
        assert activity_loss(12, 4, 3) == 1.0

    def test_loss_validation(self):
        with pytest.raises(InvalidInputError):
            activity_loss(1, 0, 1)


def test_total_loss_composite():
    trace = np.zeros((2, 4))
    raster = np.array([[0, 1, 2, 3]])
    assert total_loss(trace, 0, [raster], alpha=0.01) == pytest.approx(0.70877, abs=1e-5)
    assert total_loss(trace, 0, [raster], alpha=0) == pytest.approx(math.log(2))
    assert DEFAULT_ALPHA == 0.01


def test_peak_gradient_only_at_argmax():
    rng = np.random.default_rng(2)
    y = rng.normal(size=(2, 15, 3))
    tape = ad.Tape()
    v = tape.param("y", y)
    logits, t_star = peak_op(v)
    g = ad.backward(tape, ad.mean(logits))["y"]
    mask = np.zeros_like(y, dtype=bool)
    for b in range(2):
        for c in range(3):
            mask[b, t_star[b, c], c] = True
    assert np.all(g[~mask] == 0)
    np.testing.assert_allclose(g[mask], 1 / 6)


def test_batch_loss_matches_scalar_version():
    rng = np.random.default_rng(3)
    traces = rng.normal(size=(3, 10, 4))
    spikes = [rng.integers(0, 4, (3, 10, 5)).astype(float), rng.integers(0, 3, (3, 10, 2)).astype(float)]
    labels = np.array([0, 3, 1])

    class Out:
        trace = ad.Var(traces)

    Out.spikes = [ad.Var(s) for s in spikes]
    loss, info = batch_loss(Out, labels, 0.01)
    per = [total_loss(traces[b].T, labels[b], [s[b].T for s in spikes], 0.01) for b in range(3)]
    assert float(loss.value) == pytest.approx(np.mean(per), abs=1e-12)
