"""Loss terms, Adam, the training loop and gradient checking."""
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stosa import training
from stosa.config import RunConfig
from stosa.data import TrainingWindow, sample_negatives
from stosa.model import DOT_BASELINE, STOSA
from stosa.training import (AdamState, NonFiniteLossError, adam_update, gradient_check,
                            pvn_regularizer, step_loss, train, training_windows)

from conftest import tiny_params


def toy_batch(dataset, n=5, users=3, seed=0):
    u, w = training_windows(dataset, n)
    u, w = u[:users], TrainingWindow(w.inputs[:users], w.targets[:users], w.mask[:users])
    negs = sample_negatives(dataset, u, w.mask, np.random.default_rng(seed))
    return w, negs


def quick_config(**kw):
    base = dict(d=16, n=10, n_layers=1, dropout=0.0, lr=1e-2, max_epochs=5, patience=50,
                batch_size=16, rank_all=True, allow_deviation=True)
    base.update(kw)
    return RunConfig(**base)


class TestPvn:
    def test_examples(self):
        np.testing.assert_array_equal(pvn_regularizer([2, 5, 4], [5, 2, 4]), [0, 3, 0])

    def test_domain(self):
        with pytest.raises(ValueError):
            pvn_regularizer(-1, 2)

    @given(st.floats(0, 1e6), st.floats(0, 1e6))
    def test_nonnegative(self, a, b):
        assert pvn_regularizer(a, b) >= 0


class TestStepLoss:
    def test_equal_distances_give_log2(self, cyclic_dataset):
        p = tiny_params(STOSA, n_items=cyclic_dataset.n_items)
        w, _ = toy_batch(cyclic_dataset)
        terms, _ = step_loss(p, w, w.targets, lam=0.0, beta=0.0)
        assert terms.bpr == pytest.approx(w.mask.sum() * np.log(2), rel=1e-12)

    def test_far_negatives_vanish(self, cyclic_dataset):
        far = cyclic_dataset.n_items + 1  # extra row that never appears as an input
        p = tiny_params(STOSA, n_items=far)
        w, _ = toy_batch(cyclic_dataset)
        negs = np.where(w.mask, far, 0)
        p.arrays["item_mean"][far] += 1e3
        terms, _ = step_loss(p, w, negs, lam=0.0, beta=0.0)
        assert 0 <= terms.bpr < 1e-12

    @pytest.mark.parametrize("variant", [STOSA, DOT_BASELINE])
    def test_decomposition(self, cyclic_dataset, variant):
        p = tiny_params(variant, n_items=cyclic_dataset.n_items)
        w, negs = toy_batch(cyclic_dataset)
        t, _ = step_loss(p, w, negs, lam=0.5, beta=1e-2)
        assert t.total == pytest.approx(t.bpr + 0.5 * t.pvn + 1e-2 * t.l2, rel=1e-12)
        assert t.l2 == pytest.approx(sum(float((a ** 2).sum()) for a in p.arrays.values()))
        z, _ = step_loss(p, w, negs, lam=0.0, beta=1e-2)
        assert z.total == pytest.approx(z.bpr + 1e-2 * z.l2, rel=1e-12)
        if variant == DOT_BASELINE:
            assert t.pvn == 0

    def test_gradients_cover_every_parameter(self, cyclic_dataset):
        p = tiny_params(STOSA, n_items=cyclic_dataset.n_items)
        w, negs = toy_batch(cyclic_dataset)
        _, grads = step_loss(p, w, negs, 0.5, 1e-3)
        assert set(grads) == set(p.arrays)
        assert all(np.any(g != 0) for g in grads.values())

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_reports_term(self, cyclic_dataset):
        p = tiny_params(STOSA, n_items=cyclic_dataset.n_items)
        w, negs = toy_batch(cyclic_dataset)
        p.arrays["layers.0.ffn_mean_w1"][0, 0] = np.inf
        with pytest.raises(NonFiniteLossError) as exc:
            step_loss(p, w, negs, 0.5, 1e-3)
        assert exc.value.term == "encoder"

    def test_loss_decreases_first_ten_steps(self, cyclic_dataset):
        cfg = RunConfig(d=32, n=10, dropout=0.0, lr=1e-3, seed=0, allow_deviation=True)
        from stosa.model import init_params
        p = init_params(cfg.model_config(), cyclic_dataset.n_items, cfg.rng("init"))
        users, w = training_windows(cyclic_dataset, cfg.n)
        negs = sample_negatives(cyclic_dataset, users, w.mask, cfg.rng("negatives"))
        opt, totals = AdamState(lr=1e-3), []
        for _ in range(10):
            terms, grads = step_loss(p, w, negs, cfg.lam, cfg.beta)
            adam_update(opt, p.arrays, grads)
            totals.append(terms.total)
        assert np.all(np.diff(totals) < 0)


class TestAdam:
    def test_zero_gradient(self):
        arrays = {"w": np.array([1.0, -2.0])}
        adam_update(AdamState(), arrays, {"w": np.zeros(2)})
        np.testing.assert_array_equal(arrays["w"], [1.0, -2.0])

    def test_constant_gradient_step_is_lr_sign(self):
        arrays = {"w": np.zeros(3)}
        st_ = AdamState(lr=0.01)
        g = np.array([3.0, -0.2, 50.0])
        prev = arrays["w"].copy()
        for _ in range(2000):
            prev = arrays["w"].copy()
            adam_update(st_, arrays, {"w": g})
        np.testing.assert_allclose(arrays["w"] - prev, -0.01 * np.sign(g), rtol=1e-6)

    def test_first_step_bias_corrected(self):
        arrays = {"w": np.zeros(1)}
        adam_update(AdamState(lr=0.1), arrays, {"w": np.array([1e-3])})
        np.testing.assert_allclose(arrays["w"], [-0.1], rtol=1e-4)

    def test_moments_mirror_shapes(self):
        arrays = {"a": np.zeros((2, 3)), "b": np.zeros(4)}
        st_ = AdamState()
        adam_update(st_, arrays, {k: np.ones_like(v) for k, v in arrays.items()})
        assert st_.m["a"].shape == (2, 3) and st_.v["b"].shape == (4,) and st_.step == 1


class TestGradientCheck:
    @pytest.mark.parametrize("variant", [STOSA, DOT_BASELINE])
    def test_small_model(self, cyclic_dataset, variant):
        p = tiny_params(variant, d=4, n=4, n_layers=1, n_items=cyclic_dataset.n_items)
        w, negs = toy_batch(cyclic_dataset, n=4, users=2)
        errs = gradient_check(p, w, negs, lam=0.5, beta=1e-2)
        assert max(errs.values()) < 1e-4


class TestTrain:
    def test_log_schema_and_file(self, cyclic_dataset, tmp_path):
        res = train(cyclic_dataset, quick_config(max_epochs=3), log_path=tmp_path / "log.jsonl")
        lines = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
        assert lines == res.log and len(lines) == 3
        assert set(lines[0]) == {"epoch", "train_loss", "bpr", "pvn", "l2", "val_mrr", "elapsed_s"}
        assert res.status == "finished"

    def test_patience_zero(self, cyclic_dataset, monkeypatch):
        mrrs = iter([0.5, 0.4, 0.9])

        class Fake:
            def __init__(self):
                self.mrr = next(mrrs)

        monkeypatch.setattr(training, "evaluate", lambda *a, **k: Fake())
        res = train(cyclic_dataset, quick_config(patience=0, max_epochs=10))
        assert len(res.log) == 2 and res.status == "early-stopped" and res.best_epoch == 1

    def test_tie_keeps_later_checkpoint(self, cyclic_dataset, monkeypatch):
        mrrs = iter([0.5, 0.5, 0.4])

        class Fake:
            def __init__(self):
                self.mrr = next(mrrs)

        monkeypatch.setattr(training, "evaluate", lambda *a, **k: Fake())
        res = train(cyclic_dataset, quick_config(patience=2, max_epochs=10))
        assert res.best_epoch == 2 and len(res.log) == 3

    def test_divergence_keeps_best(self, cyclic_dataset, monkeypatch):
        real = training.step_loss
        calls = {"n": 0}

        def flaky(*a, **k):
            calls["n"] += 1
            if calls["n"] > 4:
                raise NonFiniteLossError("total", float("nan"))
            return real(*a, **k)

        monkeypatch.setattr(training, "step_loss", flaky)
        res = train(cyclic_dataset, quick_config(batch_size=25, max_epochs=10))
        assert res.status == "diverged" and len(res.log) == 2 and res.best_epoch >= 1

    def test_reproducible(self, cyclic_dataset):
        cfg = quick_config(dropout=0.3, max_epochs=3)
        a, b = train(cyclic_dataset, cfg), train(cyclic_dataset, cfg)
        strip = lambda log: [{k: v for k, v in r.items() if k != "elapsed_s"} for r in log]
        assert strip(a.log) == strip(b.log)
        for k in a.params.arrays:
            np.testing.assert_array_equal(a.params.arrays[k], b.params.arrays[k])

    @pytest.mark.slow
    @pytest.mark.parametrize("variant", [STOSA, DOT_BASELINE])
    def test_cyclic_validation_recall(self, cyclic_dataset, variant):
        from stosa.evaluation import evaluate
        cfg = quick_config(variant=variant, d=32, n=10, dropout=0.3, batch_size=256,
                           max_epochs=200, patience=200)
        res = train(cyclic_dataset, cfg)
        rep = evaluate(res.params, cyclic_dataset, "valid", rank_all=True)
        assert rep.recall[1] > 0.9
