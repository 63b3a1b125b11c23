"""Adapter-only training: synthetic tasks, masked LM loss, AdamW, early stopping, gradient checks."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as F
from .backbone import BackboneWeights, KVCache, ModelConfig, Transformer
from .errors import DivergenceError, ShapeError
from .peft import AdapterSet, make_adapter, randomize
from .tensor import Rng

TASKS = ("copy", "reverse", "shift_k", "keyed_lookup")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    warmup_fraction: float = 0.06
    batch_size: int = 16
    max_epochs: int = 10
    eval_every: int | None = None  # None: max(10, steps_per_epoch // 5)
    patience: int = 10
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    max_steps: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError(f"warmup_fraction must lie in [0, 1), got {self.warmup_fraction}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


# ---------------------------------------------------------------------------
# tasks


@dataclass
class TaskDataset:
    name: str
    train: list
    dev: list
    test: list
    recipe: dict = field(default_factory=dict)

    @property
    def prompt_len(self) -> int:
        return len(self.train[0][0])

    @property
    def target_len(self) -> int:
        return len(self.train[0][1])


def _target(name, prompt, alphabet, k, n_keys):
    p = np.asarray(prompt)
    if name == "copy":
        return p.copy()
    if name == "reverse":
        return p[::-1].copy()
    if name == "shift_k":
        return (p + k) % alphabet
    if name == "keyed_lookup":
        key = int(p[-1]) - alphabet
        return (p[:-1] + key * k) % alphabet
    raise ValueError(f"unknown task {name!r}; expected one of {TASKS}")


def make_task(name: str, n_train: int = 1000, n_dev: int = 100, n_test: int = 100, prompt_len: int = 8,
              alphabet: int = 10, k: int = 1, n_keys: int = 2, seed: int = 0,
              vocab_size: int | None = None) -> TaskDataset:
    """Deterministic synthetic (prompt, target) pairs with disjoint splits.

    ``keyed_lookup`` prompts are ``prompt_len - 1`` content tokens followed by
    a key token ``alphabet + j``; the target shifts the content by ``j * k``,
    so the right output depends on the final prompt token.
    """
    if name not in TASKS:
        raise ValueError(f"unknown task {name!r}; expected one of {TASKS}")
    if prompt_len < 1 or alphabet < 2 or min(n_train, n_dev, n_test) < 1:
        raise ValueError("invalid task sizes")
    keyed = name == "keyed_lookup"
    if keyed and (prompt_len < 2 or n_keys < 2):
        raise ValueError("keyed_lookup needs prompt_len >= 2 and n_keys >= 2")
    top = alphabet + (n_keys if keyed else 0)
    if vocab_size is not None and top > vocab_size:
        raise ValueError(f"task needs {top} token ids but the vocabulary has {vocab_size}")
    n_content = prompt_len - 1 if keyed else prompt_len
    space = alphabet ** n_content * (n_keys if keyed else 1)
    total = n_train + n_dev + n_test
    if total > space:
        raise ValueError(f"cannot draw {total} distinct prompts from a space of {space}")
    rng = Rng(seed)
    seen, prompts = set(), []
    while len(prompts) < total:
        content = rng.integers(0, alphabet, size=n_content)
        p = np.concatenate([content, [alphabet + rng.integers(0, n_keys)]]) if keyed else content
        key = tuple(int(t) for t in p)
        if key in seen:
            continue
        seen.add(key)
        prompts.append(key)
    pairs = [(list(p), [int(t) for t in _target(name, p, alphabet, k, n_keys)]) for p in prompts]
    recipe = dict(name=name, n_train=n_train, n_dev=n_dev, n_test=n_test, prompt_len=prompt_len,
                  alphabet=alphabet, k=k, n_keys=n_keys, seed=seed)
    return TaskDataset(name, pairs[:n_train], pairs[n_train:n_train + n_dev], pairs[n_train + n_dev:], recipe)


@dataclass
class Batch:
    tokens: np.ndarray      # (B, P + Ty - 1) prompt followed by all but the last target token
    targets: np.ndarray     # (B, P + Ty - 1) next-token labels, valid where mask
    mask: np.ndarray        # (B, P + Ty - 1) bool, true on target positions only
    pool_index: np.ndarray  # (B,) position of the final prompt token


def make_batch(pairs) -> Batch:
    P = len(pairs[0][0])
    Ty = len(pairs[0][1])
    if Ty == 0:
        raise ValueError("targets must be non-empty")
    if any(len(p) != P or len(t) != Ty for p, t in pairs):
        raise ShapeError("all pairs in a batch must share prompt and target lengths")
    seq = np.array([list(p) + list(t) for p, t in pairs], dtype=np.int64)
    tokens = seq[:, :-1]
    targets = np.zeros_like(tokens)
    mask = np.zeros(tokens.shape, dtype=bool)
    targets[:, P - 1:] = seq[:, P:]
    mask[:, P - 1:] = True
    return Batch(tokens, targets, mask, np.full(len(pairs), P - 1))


# ---------------------------------------------------------------------------
# loss and gradients


def loss(model: Transformer, adapter: AdapterSet | None, batch: Batch, weights=None) -> float:
    """Mean cross-entropy over target positions."""
    logits = model.forward(batch.tokens, adapter=adapter, pool_index=batch.pool_index, weights=weights)
    return float(F.cross_entropy(logits, batch.targets, batch.mask))


@dataclass
class Recording:
    loss: F.Var
    params: dict


def record(model: Transformer, adapter: AdapterSet, batch: Batch) -> Recording:
    """Forward pass with the adapter's parameters on the tape; backbone arrays stay constants."""
    params = {k: F.Var(np.asarray(v), name=k) for k, v in adapter.params().items()}
    live = adapter.with_params(params)
    logits = model.forward(batch.tokens, adapter=live, pool_index=batch.pool_index)
    return Recording(F.cross_entropy(logits, batch.targets, batch.mask), params)


def backward(recording: Recording | None) -> dict:
    """Exact gradients of the recorded loss for every adapter parameter."""
    if recording is None or not isinstance(recording.loss, F.Var):
        raise RuntimeError("backward needs a recorded forward pass")
    recording.loss.backward()
    return {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in recording.params.items()}


def loss_and_grads(model, adapter, batch) -> tuple[float, dict]:
    rec = record(model, adapter, batch)
    grads = backward(rec)
    return float(rec.loss.value), grads


def backbone_loss_and_grads(model: Transformer, batch: Batch, weights: BackboneWeights | None = None):
    """Full-model gradients; only used to pretrain the backbone before it is frozen."""
    base = model.weights if weights is None else weights
    named = {k: F.Var(v, name=k) for k, v in base.named_arrays().items()}
    weights = BackboneWeights.from_named(model.config, named)
    logits = model.forward(batch.tokens, pool_index=batch.pool_index, weights=weights)
    out = F.cross_entropy(logits, batch.targets, batch.mask)
    out.backward()
    return float(out.value), {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in named.items()}


# ---------------------------------------------------------------------------
# optimisation


def lr_at(step: int, total_steps: int, lr: float, warmup_fraction: float) -> float:
    """Linear warmup from 0 to ``lr`` then linear decay to 0 at ``total_steps``."""
    warm = int(math.ceil(warmup_fraction * total_steps))
    if step < warm:
        return lr * step / warm
    if total_steps == warm:
        return lr
    return lr * max(0.0, (total_steps - step) / (total_steps - warm))


class AdamW:
    """Decoupled-weight-decay Adam over a dict of named arrays (updated in place)."""

    def __init__(self, params: dict, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01, decay_mask=None):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.decay = decay_mask or {k: np.asarray(v).ndim >= 2 for k, v in params.items()}
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            if self.decay[k] and self.wd:
                p -= lr * self.wd * p
            p -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class TrainResult:
    adapter: AdapterSet
    history: list
    best_dev_loss: float
    best_step: int
    stopped_early: bool
    steps: int

    def history_jsonl(self) -> str:
        return "".join(json.dumps(h, sort_keys=True) + "\n" for h in self.history)


def _epoch_batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n - batch_size + 1, batch_size)] or [order]


def _eval_loss(model, adapter, pairs, batch_size=256, weights=None):
    total, count = 0.0, 0
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i:i + batch_size]
        b = make_batch(chunk)
        n = int(b.mask.sum())
        total += loss(model, adapter, b, weights=weights) * n
        count += n
    return total / count


def train(model: Transformer, adapter: AdapterSet, task: TaskDataset, cfg: TrainConfig,
          clock=time.perf_counter, log=None) -> TrainResult:
    """Train ``adapter`` on ``task.train``; returns the best-dev-loss checkpoint.

    Dev loss is evaluated every ``eval_every`` steps; training stops once
    ``patience`` consecutive evaluations fail to improve on the best.
    """
    return _fit(model, adapter, task, cfg, clock, log, full_model=False)


def pretrain_backbone(model: Transformer, task: TaskDataset, cfg: TrainConfig,
                      clock=time.perf_counter, log=None) -> TrainResult:
    """Full training of the backbone (the only place backbone weights change)."""
    return _fit(model, None, task, cfg, clock, log, full_model=True)


def _fit(model, adapter, task, cfg, clock, log, full_model):
    rng = Rng(cfg.seed)
    n = len(task.train)
    steps_per_epoch = max(1, n // cfg.batch_size)
    total = steps_per_epoch * cfg.max_epochs
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    eval_every = cfg.eval_every or max(10, steps_per_epoch // 5)

    if full_model:
        params = {k: v.copy() for k, v in model.weights.named_arrays().items()}
        decay = {k: v.ndim >= 2 and k != "token_embedding" for k, v in params.items()}
    else:
        params = {k: np.array(v, copy=True) for k, v in adapter.params().items()}
        decay = None
    opt = AdamW(params, cfg.betas, cfg.eps, cfg.weight_decay, decay)

    def current():
        if full_model:
            return BackboneWeights.from_named(model.config, params)
        return adapter.with_params(params)

    def dev_loss():
        if full_model:
            return _eval_loss(model, None, task.dev, weights=current())
        return _eval_loss(model, current(), task.dev)

    history = []
    best = dev_loss()
    best_params = {k: v.copy() for k, v in params.items()}
    best_step, bad, step, stopped = 0, 0, 0, False
    t0 = clock()
    history.append({"step": 0, "lr": 0.0, "train_loss": None, "dev_loss": best, "wall_time": clock() - t0})
    while step < total and not stopped:
        for idx in _epoch_batches(n, cfg.batch_size, rng):
            if step >= total:
                break
            batch = make_batch([task.train[i] for i in idx])
            if full_model:
                train_loss, grads = backbone_loss_and_grads(model, batch, current())
            else:
                train_loss, grads = loss_and_grads(model, current(), batch)
            if not math.isfinite(train_loss):
                raise DivergenceError(f"non-finite training loss at step {step}")
            lr = lr_at(step, total, cfg.lr, cfg.warmup_fraction)
            opt.step(grads, lr)
            step += 1
            if step % eval_every == 0 or step == total:
                dl = dev_loss()
                if not math.isfinite(dl):
                    raise DivergenceError(f"non-finite dev loss at step {step}")
                rec = {"step": step, "lr": lr, "train_loss": train_loss, "dev_loss": dl, "wall_time": clock() - t0}
                history.append(rec)
                if log:
                    log(rec)
                if dl < best:
                    best, best_step, bad = dl, step, 0
                    best_params = {k: v.copy() for k, v in params.items()}
                else:
                    bad += 1
                    if bad >= cfg.patience:
                        stopped = True
                        break
    if full_model:
        model.weights = BackboneWeights.from_named(model.config, best_params)
        out = None
    else:
        out = adapter.with_params(best_params)
    return TrainResult(out, history, best, best_step, stopped, step)


# ---------------------------------------------------------------------------
# evaluation


def greedy_batch(model: Transformer, adapter, prompts: np.ndarray, n_new: int) -> np.ndarray:
    """Cached greedy decoding of equal-length prompts as one batch."""
    prompts = np.asarray(prompts, dtype=np.int64)
    B, P = prompts.shape
    cache = KVCache(model.config, B, model.dtype, capacity=P + n_new)
    logits = model.forward(prompts, adapter=adapter, cache=cache, pool_index=np.full(B, P - 1))[:, -1]
    out = np.zeros((B, n_new), dtype=np.int64)
    for i in range(n_new):
        out[:, i] = np.argmax(logits, axis=-1)
        if i + 1 < n_new:
            logits = model.forward(out[:, i:i + 1], adapter=adapter, cache=cache)[:, -1]
    return out


def token_accuracy(model: Transformer, adapter, pairs, batch_size: int = 256) -> float:
    """Fraction of target tokens reproduced by greedy decoding from the prompt."""
    hits = total = 0
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i:i + batch_size]
        prompts = np.array([p for p, _ in chunk])
        targets = np.array([t for _, t in chunk])
        pred = greedy_batch(model, adapter, prompts, targets.shape[1])
        hits += int((pred == targets).sum())
        total += targets.size
    return hits / total


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    errors: dict
    tolerance: float
    eps: float

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def to_dict(self) -> dict:
        return {"errors": self.errors, "tolerance": self.tolerance, "eps": self.eps, "passed": self.passed}


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Block relative error ``||a - n|| / max(||a||, ||n||)``, 0 when both vanish.

    Measured per block rather than per element: central differences carry an
    O(eps^2) truncation term that swamps individual entries whose gradient is
    orders of magnitude below the block's scale.
    """
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    return float(np.linalg.norm(a - n) / denom) if denom > 0 else 0.0


def numeric_grads(model, adapter, batch, eps: float = 1e-4) -> dict:
    params = {k: np.array(v, dtype=np.float64, copy=True) for k, v in adapter.params().items()}
    out = {}
    for key, p in params.items():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss(model, adapter.with_params(params), batch)
            flat[i] = orig - eps
            down = loss(model, adapter.with_params(params), batch)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
        out[key] = g
    return out


def gradcheck(model: Transformer, adapter: AdapterSet, batch: Batch, eps: float = 1e-4,
              tolerance: float = 1e-5) -> GradCheckReport:
    """Central finite differences against the tape, per parameter block (64-bit only)."""
    if model.dtype != np.float64:
        raise ValueError("gradcheck needs a float64 model")
    _, analytic = loss_and_grads(model, adapter, batch)
    numeric = numeric_grads(model, adapter, batch, eps)
    errors = {k: relative_error(analytic[k], numeric[k]) for k in analytic}
    return GradCheckReport(errors, tolerance, eps)


def gradcheck_model(n_layers=2, d_model=8, n_heads=2, d_ffn=12, vocab_size=16, seed=0) -> Transformer:
    cfg = ModelConfig(n_layers=n_layers, d_model=d_model, n_heads=n_heads, d_ffn=d_ffn, vocab_size=vocab_size,
                      max_seq_len=64)
    return Transformer(cfg, precision="float64", seed=seed)


def gradcheck_methods(model: Transformer, methods=("para", "lora", "ia3"), seed: int = 0, eps: float = 1e-4,
                      tolerance: float = 1e-5, batch: int = 2, prompt_len: int = 4, target_len: int = 3) -> dict:
    """Gradient check of every method on randomized adapters (away from the identity point)."""
    rng = Rng(seed)
    V = model.config.vocab_size
    pairs = [(list(rng.integers(0, V, size=prompt_len)), list(rng.integers(0, V, size=target_len)))
             for _ in range(batch)]
    b = make_batch(pairs)
    out = {}
    for i, m in enumerate(methods):
        adapter = randomize(make_adapter(m, model.config, seed=seed + i), seed=seed + 100 + i, std=0.3)
        out[m] = gradcheck(model, adapter, b, eps, tolerance)
    return out


PRETRAIN_RECIPE = dict(prompt_len=8, n_train=4000, n_dev=200, n_test=200, lr=3e-3, batch_size=32, max_steps=600)


def pretrain_copy(config: ModelConfig, seed: int = 0, precision="float64", log=None, **overrides):
    """Copy-pretrained backbone over the full vocabulary; returns ``(model, result, test_accuracy)``."""
    unknown = set(overrides) - set(PRETRAIN_RECIPE)
    if unknown:
        raise ValueError(f"unknown pretrain fields {sorted(unknown)}; expected a subset of {sorted(PRETRAIN_RECIPE)}")
    r = {**PRETRAIN_RECIPE, **overrides}
    model = Transformer(config, precision=precision, seed=seed)
    task = make_task("copy", n_train=r["n_train"], n_dev=r["n_dev"], n_test=r["n_test"],
                     prompt_len=r["prompt_len"], alphabet=config.vocab_size, seed=seed + 1)
    cfg = TrainConfig(lr=r["lr"], batch_size=r["batch_size"], max_epochs=1000, max_steps=r["max_steps"],
                      seed=seed)
    result = pretrain_backbone(model, task, cfg, log=log)
    return model, result, token_accuracy(model, None, task.test)
