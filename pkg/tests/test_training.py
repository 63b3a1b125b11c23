import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from paralm.errors import DivergenceError
from paralm.peft import make_adapter, randomize
from paralm.training import (AdamW, TaskDataset, TrainConfig, backward, gradcheck, gradcheck_methods, greedy_batch,
                             loss, loss_and_grads, lr_at, make_batch, make_task, record, relative_error,
                             token_accuracy, train)


def test_task_definitions():
    t = make_task("copy", n_train=5, n_dev=2, n_test=2, prompt_len=3, alphabet=10)
    for p, y in t.train:
        assert y == p
    s = make_task("shift_k", n_train=50, n_dev=5, n_test=5, prompt_len=3, alphabet=10, k=1)
    pairs = dict((tuple(p), y) for p, y in s.train + s.dev + s.test)
    for p, y in pairs.items():
        assert y == [(x + 1) % 10 for x in p]
    from paralm.training import _target
    assert list(_target("shift_k", [5, 9, 2], 10, 1, 2)) == [6, 0, 3]
    assert list(_target("copy", [5, 9, 2], 10, 1, 2)) == [5, 9, 2]
    r = make_task("reverse", n_train=5, n_dev=1, n_test=1, prompt_len=4)
    assert all(y == p[::-1] for p, y in r.train)


def test_keyed_lookup_depends_on_key():
    t = make_task("keyed_lookup", n_train=40, n_dev=5, n_test=5, prompt_len=5, alphabet=10, k=3, n_keys=2)
    for p, y in t.train:
        assert p[-1] in (10, 11) and len(y) == 4
    from paralm.training import _target
    a = list(_target("keyed_lookup", [1, 2, 3, 10], 10, 3, 2))
    b = list(_target("keyed_lookup", [1, 2, 3, 11], 10, 3, 2))
    assert a == [1, 2, 3] and b == [4, 5, 6] and a != b


def test_tasks_deterministic_and_disjoint():
    a = make_task("shift_k", n_train=200, n_dev=50, n_test=50, seed=4)
    b = make_task("shift_k", n_train=200, n_dev=50, n_test=50, seed=4)
    assert a.train == b.train and a.test == b.test
    splits = [set(tuple(p) for p, _ in s) for s in (a.train, a.dev, a.test)]
    assert not (splits[0] & splits[1]) and not (splits[0] & splits[2]) and not (splits[1] & splits[2])
    assert make_task("shift_k", n_train=200, n_dev=50, n_test=50, seed=5).train != a.train


def test_task_errors():
    with pytest.raises(ValueError):
        make_task("sort")
    with pytest.raises(ValueError):
        make_task("copy", n_train=0)
    with pytest.raises(ValueError):
        make_task("copy", n_train=100, n_dev=1, n_test=1, prompt_len=2, alphabet=3)
    with pytest.raises(ValueError):
        make_task("keyed_lookup", alphabet=10, n_keys=2, vocab_size=11)


def test_make_batch_masks_prompt():
    b = make_batch([([1, 2, 3], [4, 5]), ([6, 7, 8], [9, 1])])
    np.testing.assert_array_equal(b.tokens, [[1, 2, 3, 4], [6, 7, 8, 9]])
    np.testing.assert_array_equal(b.mask, [[False, False, True, True]] * 2)
    np.testing.assert_array_equal(b.targets[:, 2:], [[4, 5], [9, 1]])
    np.testing.assert_array_equal(b.pool_index, [2, 2])


@given(total=st.integers(2, 500), frac=st.floats(0.0, 0.5), lr=st.floats(1e-5, 1.0))
def test_lr_schedule_shape(total, frac, lr):
    vals = [lr_at(s, total, lr, frac) for s in range(total + 1)]
    warm = math.ceil(frac * total)
    assert vals[0] == (0.0 if warm > 0 else lr)
    assert abs(vals[-1]) < 1e-12 or warm == total
    assert max(vals) <= lr * (1 + 1e-12)
    if 0 < warm <= total:
        assert abs(vals[warm] - lr) < 1e-12
    assert all(b >= a - 1e-15 for a, b in zip(vals[:warm + 1], vals[1:warm + 1]))
    assert all(b <= a + 1e-15 for a, b in zip(vals[warm:], vals[warm + 1:]))


def test_adamw_decay_mask():
    p = {"m": np.ones((2, 2)), "v": np.ones(2)}
    opt = AdamW(p, weight_decay=0.5)
    opt.step({"m": np.zeros((2, 2)), "v": np.zeros(2)}, lr=0.1)
    np.testing.assert_allclose(p["m"], 0.95)
    np.testing.assert_array_equal(p["v"], 1.0)
    q = {"x": np.zeros(1)}
    AdamW(q, weight_decay=0.0).step({"x": np.array([3.0])}, lr=0.1)
    np.testing.assert_allclose(q["x"], -0.1, rtol=1e-6)


def test_loss_uniform_logits(tiny):
    b = make_batch([([1, 2], [3, 4])])
    w = tiny.weights.copy()
    w.lm_head[:] = 0.0
    assert abs(loss(tiny, None, b, weights=w) - math.log(tiny.config.vocab_size)) < 1e-12


def test_zero_w_up_kills_w_down_gradient(tiny):
    a = make_adapter("para", tiny.config)
    b = make_batch([([1, 2, 3], [4, 5]), ([5, 6, 7], [8, 9])])
    _, g = loss_and_grads(tiny, a, b)
    for i in range(tiny.config.n_layers):
        assert not g[f"layers.{i}.w_down"].any()
    assert any(g[f"layers.{i}.w_up"].any() for i in range(tiny.config.n_layers))
    assert g["layers.0.b_up"].any()


def test_backward_requires_recording(tiny):
    with pytest.raises(RuntimeError):
        backward(None)
    a = make_adapter("ia3", tiny.config)
    rec = record(tiny, a, make_batch([([1, 2], [3, 4])]))
    assert set(backward(rec)) == set(a.params())


@pytest.mark.parametrize("method", ["para", "lora", "ia3"])
def test_gradcheck_passes(tiny, method):
    r = gradcheck_methods(tiny, methods=(method,), seed=1)[method]
    assert r.passed, r.errors
    assert set(r.to_dict()) == {"errors", "tolerance", "eps", "passed"}


def test_gradcheck_report_flags_wrong_gradients(tiny, monkeypatch):
    import paralm.training as T
    a = randomize(make_adapter("ia3", tiny.config), seed=0)
    b = make_batch([([1, 2], [3, 4])])
    real = T.loss_and_grads
    monkeypatch.setattr(T, "loss_and_grads", lambda m, ad, bt: (real(m, ad, bt)[0],
                                                              {k: v * 1.01 for k, v in real(m, ad, bt)[1].items()}))
    rep = gradcheck(tiny, a, b)
    assert not rep.passed and rep.max_error > 1e-3


def test_relative_error():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([1.0, 0.0]), np.array([1.0, 1e-9])) < 1e-8


@pytest.fixture(scope="module")
def small_task():
    return make_task("shift_k", n_train=64, n_dev=16, n_test=16, prompt_len=4, alphabet=10, k=1, seed=3)


def test_training_keeps_backbone_frozen_and_is_deterministic(tiny, small_task):
    before = {k: v.tobytes() for k, v in tiny.weights.named_arrays().items()}
    cfg = TrainConfig(lr=1e-2, batch_size=8, max_epochs=2, eval_every=4, seed=0)
    r1 = train(tiny, make_adapter("para", tiny.config), small_task, cfg)
    r2 = train(tiny, make_adapter("para", tiny.config), small_task, cfg)
    assert {k: v.tobytes() for k, v in tiny.weights.named_arrays().items()} == before
    strip = [{k: v for k, v in h.items() if k != "wall_time"} for h in r1.history]
    assert strip == [{k: v for k, v in h.items() if k != "wall_time"} for h in r2.history]
    assert all(np.asarray(v).tobytes() == np.asarray(r2.adapter.params()[k]).tobytes()
               for k, v in r1.adapter.params().items())
    assert r1.best_dev_loss < r1.history[0]["dev_loss"]
    rows = [json.loads(x) for x in r1.history_jsonl().splitlines()]
    assert set(rows[1]) == {"step", "lr", "train_loss", "dev_loss", "wall_time"}


def test_patience_stops_at_plateau(tiny):
    # constant target already predicted by a backbone that always emits token 0
    w = tiny.weights.copy()
    w.lm_head[:] = 0.0
    w.lm_head[:, 0] = 100.0
    from paralm.backbone import Transformer
    m = Transformer(tiny.config, w)
    pairs = [([i % 9 + 1, 2], [0, 0]) for i in range(40)]
    task = TaskDataset("const", pairs[:32], pairs[32:36], pairs[36:])
    r = train(m, make_adapter("ia3", m.config), task, TrainConfig(lr=1e-3, batch_size=4, max_epochs=5,
                                                                   eval_every=1, patience=1))
    assert r.stopped_early and r.steps == 1


def test_divergence_raises(tiny, small_task, monkeypatch):
    import paralm.training as T
    monkeypatch.setattr(T, "loss_and_grads", lambda *a: (float("nan"), {}))
    with pytest.raises(DivergenceError):
        train(tiny, make_adapter("ia3", tiny.config), small_task, TrainConfig(batch_size=8))


def test_token_accuracy_and_greedy_batch(tiny):
    prompts = np.array([[1, 2, 3], [4, 5, 6]])
    out = greedy_batch(tiny, None, prompts, 3)
    from paralm.backbone import generate
    assert [list(r) for r in out] == [generate(tiny, p, 3) for p in prompts]
    pairs = [(list(p), list(o)) for p, o in zip(prompts, out)]
    assert token_accuracy(tiny, None, pairs) == 1.0


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(warmup_fraction=1.0)
    with pytest.raises(ValueError):
        TrainConfig(patience=0)
    assert TrainConfig().lr == 1e-4
