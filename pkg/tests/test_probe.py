import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmpocl.datastream import Dataset, synth_gaussian_stream
from cmpocl.models import EncoderState, NetworkSpec
from cmpocl.probe import (ProbeConfig, ProbeConfigError, effective_rank, extract_features, params_checksum,
                          representation_diagnostics, train_probe)
from cmpocl.tensor import ContractError


def plateau_data(n=200, classes=4, d=3):
    """Constant features: validation accuracy can never improve after epoch 1."""
    y = np.arange(n) % classes
    return np.zeros((n, d)), y, np.zeros((40, d)), np.arange(40) % classes


class TestSchedule:
    def test_lr_values(self):
        cfg = ProbeConfig()
        assert [cfg.lr_at(k) for k in range(7)] == [0.05 / 3 ** k for k in range(7)]
        assert cfg.lr_at(5) >= 1e-4 > cfg.lr_at(6)
        assert cfg.lr_at(6) == pytest.approx(6.86e-5, rel=1e-3)

    def test_plateau_halts_below_floor(self):
        res = train_probe(*plateau_data(), ProbeConfig(seed=0), 4)
        assert sorted(set(res.lr_trajectory), reverse=True) == [0.05 / 3 ** k for k in range(6)]
        assert all(lr in {0.05 / 3 ** k for k in range(6)} for lr in res.lr_trajectory)
        # one improving epoch, then 3 stale epochs per reduction, six reductions
        assert res.epochs == 1 + 3 * 6 == len(res.lr_trajectory)

    def test_max_epochs(self):
        res = train_probe(*plateau_data(), ProbeConfig(patience=1000, seed=0), 4)
        assert res.epochs == 100
        assert set(res.lr_trajectory) == {0.05}

    def test_two_thirds_alternative(self):
        cfg = ProbeConfig(decay=2 / 3)
        assert cfg.lr_at(2) == pytest.approx(0.05 * 4 / 9)

    def test_invalid(self):
        with pytest.raises(ProbeConfigError):
            ProbeConfig(lr_floor=0.1)
        with pytest.raises(ProbeConfigError):
            ProbeConfig(features="pixels")


class TestAccuracy:
    def test_separable(self):
        rng = np.random.default_rng(0)
        w_true = rng.standard_normal((6, 3))

        def draw(n):
            x = rng.standard_normal((n, 6))
            scores = x @ w_true
            top2 = np.sort(scores, axis=1)[:, -2:]
            keep = top2[:, 1] - top2[:, 0] > 0.3  # margin so a perceptron provably converges
            return x[keep], np.argmax(scores[keep], axis=1)

        xtr, ytr = draw(3000)
        xte, yte = draw(1000)
        assert np.all(np.argmax(xte @ w_true, 1) == yte)  # the oracle separates perfectly
        res = train_probe(xtr, ytr, xte, yte, ProbeConfig(seed=1), 3)
        assert res.accuracy >= 0.99

    def test_random_labels_chance(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((3000, 8))
        y = rng.integers(0, 4, 3000)
        res = train_probe(x[:1000], y[:1000], x[1000:], y[1000:], ProbeConfig(seed=0), 4)
        assert abs(res.accuracy - 0.25) <= 0.05

    def test_single_class_rejected(self):
        with pytest.raises(ProbeConfigError):
            train_probe(np.zeros((10, 2)), np.zeros(10, int), np.zeros((2, 2)), np.zeros(2, int))

    def test_result_fields(self):
        ds = synth_gaussian_stream(3, 4, 60, 6.0, 0)
        res = train_probe(ds.samples, ds.labels, ds.samples, ds.labels, ProbeConfig(seed=0), 3)
        assert 0 <= res.accuracy <= 1
        assert set(res.per_class) == {0, 1, 2}
        assert 1 <= res.best_epoch <= res.epochs <= 100
        assert set(res.to_dict()) >= {"accuracy", "per_class", "epochs", "lr_trajectory"}


class TestExtract:
    def test_shape_frozen_deterministic(self):
        spec = NetworkSpec(input_dim=5, hidden=(7,), proj_hidden=6, dim=4)
        state = EncoderState.create(spec, 0, with_target=True)
        ds = synth_gaussian_stream(2, 5, 30, 1.0, 0)
        before = params_checksum(state)
        f1, y1 = extract_features(state, ds)
        f2, _ = extract_features(state, ds)
        fb, _ = extract_features(state, ds, "backbone")
        assert f1.shape == (60, 4) and fb.shape == (60, 7)
        np.testing.assert_array_equal(f1, f2)
        np.testing.assert_array_equal(y1, ds.labels)
        assert params_checksum(state) == before

    def test_width_mismatch(self):
        state = EncoderState.create(NetworkSpec(input_dim=5), 0, with_target=False)
        with pytest.raises(ContractError):
            extract_features(state, Dataset(np.zeros((3, 4)), [0, 1, 0], 2))


class TestDiagnostics:
    def test_identical_rows(self):
        rep = representation_diagnostics(np.tile([[1.0, 2.0, 3.0]], (10, 1)))
        assert rep.effective_rank == pytest.approx(1.0, abs=1e-12)
        assert rep.mean_cosine == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("n,d", [(4, 4), (3, 8), (6, 6)])
    def test_orthonormal_rows(self, n, d):
        q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((d, d)))
        rep = representation_diagnostics(q[:n])
        assert rep.effective_rank == pytest.approx(min(n, d), abs=1e-9)
        assert rep.mean_cosine == pytest.approx(0.0, abs=1e-12)

    def test_gaussian(self):
        f = np.random.default_rng(0).standard_normal((1000, 16))
        assert representation_diagnostics(f).effective_rank >= 15

    def test_mean_cosine_matches_pairwise_loop(self):
        f = np.random.default_rng(1).standard_normal((7, 3))
        u = f / np.linalg.norm(f, axis=1, keepdims=True)
        ref = np.mean([u[i] @ u[j] for i in range(7) for j in range(7) if i != j])
        assert representation_diagnostics(f).mean_cosine == pytest.approx(ref, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0.0, 10.0), min_size=1, max_size=10))
    def test_effective_rank_bounds(self, s):
        r = effective_rank(np.array(s))
        nonzero = sum(v > max(s) * 1e-12 for v in s) if max(s) > 0 else 0
        assert 0 <= r <= max(nonzero, 0) + 1e-9
