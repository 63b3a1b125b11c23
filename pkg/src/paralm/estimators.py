"""scikit-learn style facade: fit an adapter on (prompt, target) id arrays over a frozen backbone."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .backbone import KVCache, Transformer
from .peft import make_adapter
from .training import TaskDataset, TrainConfig, greedy_batch, token_accuracy, train


def _ids(X, name, vocab):
    X = check_array(X, dtype=np.int64, ensure_2d=True, input_name=name)
    if X.min() < 0 or X.max() >= vocab:
        raise ValueError(f"{name} token ids must lie in [0, {vocab})")
    return X


class AdapterEstimator(BaseEstimator):
    """Trains one adapter set; the backbone passed in is never modified.

    ``X`` holds equal-length prompts ``(n_samples, prompt_len)`` and ``y`` the
    target continuations ``(n_samples, target_len)``, both as token ids.
    """

    def __init__(self, backbone=None, method="para", r=12, rank=16, alpha=16.0, lr=1e-2, batch_size=16,
                 max_epochs=10, patience=10, dev_fraction=0.1, seed=0):
        self.backbone = backbone
        self.method = method
        self.r = r
        self.rank = rank
        self.alpha = alpha
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.dev_fraction = dev_fraction
        self.seed = seed

    def _model(self) -> Transformer:
        if isinstance(self.backbone, Transformer):
            return self.backbone
        if self.backbone is None:
            raise ValueError("backbone is required (a Transformer or a weight file path)")
        return Transformer.load(self.backbone)

    def _hyper(self):
        if self.method == "para":
            return {"r": self.r}
        if self.method == "lora":
            return {"rank": self.rank, "alpha": self.alpha}
        return {}

    def fit(self, X, y, X_dev=None, y_dev=None):
        model = self._model()
        vocab = model.config.vocab_size
        X, y = _ids(X, "X", vocab), _ids(y, "y", vocab)
        if len(X) != len(y):
            raise ValueError(f"X has {len(X)} samples but y has {len(y)}")
        pairs = [(list(map(int, p)), list(map(int, t))) for p, t in zip(X, y)]
        if X_dev is None:
            n_dev = max(1, int(round(self.dev_fraction * len(pairs))))
            if n_dev >= len(pairs):
                raise ValueError("need more samples than the dev split takes")
            order = np.random.default_rng(self.seed).permutation(len(pairs))
            dev = [pairs[i] for i in order[:n_dev]]
            tr = [pairs[i] for i in order[n_dev:]]
        else:
            Xd, yd = _ids(X_dev, "X_dev", vocab), _ids(y_dev, "y_dev", vocab)
            tr, dev = pairs, [(list(map(int, p)), list(map(int, t))) for p, t in zip(Xd, yd)]
        task = TaskDataset("custom", tr, dev, [])
        adapter = make_adapter(self.method, model.config, seed=self.seed, precision=model.dtype, **self._hyper())
        cfg = TrainConfig(lr=self.lr, batch_size=min(self.batch_size, len(tr)), max_epochs=self.max_epochs,
                          patience=self.patience, seed=self.seed)
        result = train(model, adapter, task, cfg)
        self.model_ = model
        self.adapter_ = result.adapter
        self.history_ = result.history
        self.n_params_ = result.adapter.n_params
        self.prompt_len_ = X.shape[1]
        self.target_len_ = y.shape[1]
        return self

    def predict(self, X, max_new_tokens=None):
        """Greedy continuations ``(n_samples, max_new_tokens)``."""
        check_is_fitted(self, "adapter_")
        X = _ids(X, "X", self.model_.config.vocab_size)
        return greedy_batch(self.model_, self.adapter_, X, max_new_tokens or self.target_len_)

    def transform(self, X):
        """Per-prompt adjusting vectors, concatenated over layers as ``(l_q, l_v, l_u)``.

        Static methods (IA3) give the same row for every prompt; LoRA has no
        vectors to report.
        """
        check_is_fitted(self, "adapter_")
        X = _ids(X, "X", self.model_.config.vocab_size)
        c = self.model_.config
        if self.adapter_.method == "para":
            cache = KVCache(c, len(X), self.model_.dtype, capacity=X.shape[1])
            self.model_.forward(X, adapter=self.adapter_, cache=cache, pool_index=np.full(len(X), X.shape[1] - 1))
            return np.concatenate([np.concatenate([v.l_q, v.l_v, v.l_u], axis=-1) for v in cache.vectors], axis=-1)
        if self.adapter_.method == "ia3":
            row = np.concatenate([np.concatenate([b["l_k"], b["l_v"], b["l_ff"]]) for b in self.adapter_.layers])
            return np.tile(row, (len(X), 1))
        raise ValueError(f"method {self.adapter_.method!r} has no adjusting vectors")

    def score(self, X, y):
        """Greedy token accuracy against ``y``."""
        check_is_fitted(self, "adapter_")
        y = _ids(y, "y", self.model_.config.vocab_size)
        X = _ids(X, "X", self.model_.config.vocab_size)
        return token_accuracy(self.model_, self.adapter_, [(list(p), list(t)) for p, t in zip(X, y)])
