import json

import numpy as np
import pytest

from cmpocl.checkpoint import load_checkpoint
from cmpocl.datastream import AugmentConfig, MiniBatch, build_stream, synth_gaussian_stream
from cmpocl.losses import CmpHyperParams
from cmpocl.models import NetworkSpec
from cmpocl.trainer import OnlineTrainer, StrategyConfig, TrainingAborted, run_stream

SPEC = NetworkSpec(input_dim=8, hidden=(16,), proj_hidden=16, dim=8)


def strategy(method, base="byol", n=20, **kw):
    kw.setdefault("buffer_size", 500 if method.startswith("er-") else 0)
    return StrategyConfig(method, base, CmpHyperParams(n_patches=n, beta=0.5), lr=0.01, **kw)


def batch(step=0, b=10, seed=0):
    x = np.random.default_rng(seed).standard_normal((b, 8))
    return MiniBatch(x, np.arange(step * b, step * b + b), step)


class TestStrategyConfig:
    def test_er_needs_buffer(self):
        with pytest.raises(ValueError):
            StrategyConfig("er-reservoir", buffer_size=0)

    def test_cmp_forbids_buffer(self):
        with pytest.raises(ValueError):
            StrategyConfig("cmp", buffer_size=10)

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            StrategyConfig("lwf")

    def test_roles(self):
        assert StrategyConfig("cmp", "byol").uses_target
        assert not StrategyConfig("cmp", "simsiam").uses_target
        assert not StrategyConfig("emp-ssl").uses_predictor


class TestBatchArithmetic:
    def test_cmp_two_hundred_embeddings(self):
        t = OnlineTrainer(strategy("cmp"), SPEC, AugmentConfig(n_patches=20))
        assert t.train_step(batch()).views == 200

    def test_er_two_hundred_views_after_warmup(self):
        t = OnlineTrainer(strategy("er-reservoir"), SPEC, AugmentConfig())
        first = t.train_step(batch(0))
        assert first.views == 20  # cold start: buffer still empty
        for s in range(1, 12):
            rep = t.train_step(batch(s, seed=s))
        assert rep.views == 200 and rep.buffer == 120

    def test_fifo_uses_whole_buffer(self):
        t = OnlineTrainer(strategy("er-fifo", buffer_size=90), SPEC, AugmentConfig())
        reps = [t.train_step(batch(s, seed=s)) for s in range(12)]
        assert [r.views for r in reps[:3]] == [20, 40, 60]
        assert reps[-1].views == 200 and reps[-1].buffer == 90

    def test_finetune_twenty_views(self):
        t = OnlineTrainer(strategy("finetune", "simsiam"), SPEC, AugmentConfig())
        assert t.train_step(batch()).views == 20

    def test_replay_before_insert(self):
        t = OnlineTrainer(strategy("er-reservoir"), SPEC, AugmentConfig())
        t.train_step(batch(0))
        items = t._items(batch(1, seed=1))
        ids = [sid for sid, _ in items]
        assert ids[:10] == list(range(10, 20))
        assert set(ids[10:]) <= set(range(10))


class TestStep:
    @pytest.mark.parametrize("method,base", [("cmp", "byol"), ("cmp", "simsiam"), ("emp-ssl", "byol")])
    def test_components_sum_to_loss(self, method, base):
        t = OnlineTrainer(strategy(method, base, n=4), SPEC, AugmentConfig(n_patches=4))
        rep = t.train_step(batch())
        assert abs(rep.ssl + rep.tcr - rep.loss) < 1e-9
        assert rep.tcr < 0  # coding rate enters with a minus sign

    def test_lr_zero_keeps_online_params(self):
        strat = StrategyConfig("cmp", "byol", CmpHyperParams(n_patches=4), lr=0.0, ema_tau=0.5)
        t = OnlineTrainer(strat, SPEC, AugmentConfig(n_patches=4))
        online0 = {k: v.copy() for k, v in t.state.online.items()}
        pred0 = {k: v.copy() for k, v in t.state.predictor.items()}
        t.state.target = {k: v + 1.0 for k, v in online0.items()}
        for s in range(3):
            t.train_step(batch(s, seed=s))
        for k in online0:
            np.testing.assert_array_equal(t.state.online[k], online0[k])
            np.testing.assert_allclose(t.state.target[k], online0[k] + 0.125, rtol=0, atol=1e-15)
        for k in pred0:
            np.testing.assert_array_equal(t.state.predictor[k], pred0[k])

    def test_target_untouched_by_sgd(self):
        strat = StrategyConfig("finetune", "byol", lr=0.5, ema_tau=1.0)
        t = OnlineTrainer(strat, SPEC, AugmentConfig())
        target0 = {k: v.copy() for k, v in t.state.target.items()}
        t.train_step(batch())
        for k in target0:
            np.testing.assert_array_equal(t.state.target[k], target0[k])
        assert any(np.any(t.state.online[k] != target0[k]) for k in target0)

    def test_nonfinite_aborts_with_diagnostics(self):
        t = OnlineTrainer(strategy("cmp", n=4), SPEC, AugmentConfig(n_patches=4))
        bad = batch()
        bad.inputs[0, 0] = np.nan
        with pytest.raises(TrainingAborted) as err:
            t.train_step(bad)
        assert err.value.diagnostics["step"] == 0

    def test_patch_count_must_match(self):
        with pytest.raises(ValueError):
            OnlineTrainer(strategy("cmp", n=4), SPEC, AugmentConfig(n_patches=5))


class TestRunStream:
    def _run(self, out=None, method="cmp", seed=0):
        ds = synth_gaussian_stream(4, 8, 25, 3.0, seed=0)
        return run_stream(strategy(method, n=4, seed=seed), ds, SPEC, AugmentConfig(n_patches=4, seed=seed),
                          split_count=2, stream_seed=seed, out_dir=out)

    def test_single_pass_step_count(self):
        ds = synth_gaussian_stream(10, 8, 100, 3.0, seed=0)
        _, it = build_stream(ds, 5, 10, seed=0)
        assert sum(len(b) for b in it) == 1000
        _, reports = run_stream(strategy("finetune"), ds, SPEC, AugmentConfig(), split_count=5)
        assert len(reports) == 100

    def test_deterministic_trajectory(self):
        _, a = self._run()
        _, b = self._run()
        assert [r.loss for r in a] == [r.loss for r in b]

    def test_seed_changes_trajectory(self):
        _, a = self._run(seed=0)
        _, b = self._run(seed=1)
        assert [r.loss for r in a] != [r.loss for r in b]

    def test_artifacts(self, tmp_path):
        state, reports = self._run(tmp_path, method="er-reservoir")
        lines = (tmp_path / "steps.jsonl").read_text().splitlines()
        assert len(lines) == len(reports) == 10
        assert set(json.loads(lines[0])) == {"step", "loss", "ssl", "tcr", "buffer", "views"}
        assert "ms" in json.loads((tmp_path / "timings.jsonl").read_text().splitlines()[0])
        back, extra, meta = load_checkpoint(tmp_path / "checkpoint.cmpc")
        for k, v in state.online.items():
            np.testing.assert_array_equal(back.online[k], v)
        assert extra["buffer.inputs"].shape == (100, 8)
        assert meta["steps"] == 10 and meta["buffer"]["seen"] == 100
