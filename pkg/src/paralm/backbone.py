"""Frozen LLaMA-style decoder: pre-RMSNorm attention + gated FFN, KV cache, generation.

The forward pass is written once against `paralm.autodiff` ops, so it runs on
plain arrays for inference and records a tape when trainable parameters are
passed in as `Var` objects.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as F
from . import formats
from .errors import CacheOverflowError, EmptyPromptError, FormatError, ShapeError
from . import tensor as kernels
from .tensor import Rng, resolve_dtype, track

WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    d_ffn: int = 172
    n_heads: int = 4
    vocab_size: int = 64
    max_seq_len: int = 512
    ffn_activation: str = "silu"
    positional: str = "rope"
    norm_eps: float = 1e-6
    rope_base: float = 10000.0

    def __post_init__(self):
        for name in ("n_layers", "d_model", "d_ffn", "n_heads", "vocab_size", "max_seq_len"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.positional == "rope" and self.d_head % 2:
            raise ValueError(f"rotary embeddings need an even head size, got {self.d_head}")
        if self.ffn_activation not in ("silu", "gelu", "relu"):
            raise ValueError(f"unknown ffn_activation {self.ffn_activation!r}")
        if self.positional not in ("rope", "sinusoidal"):
            raise ValueError(f"unknown positional encoding {self.positional!r}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def bench(cls, **overrides) -> "ModelConfig":
        """4 layers, d_model 256; d_ffn keeps the 7B ratio 11008/4096."""
        kw = dict(n_layers=4, d_model=256, n_heads=4, d_ffn=688, vocab_size=64, max_seq_len=512)
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def llama2_7b(cls) -> "ModelConfig":
        return cls(n_layers=32, d_model=4096, d_ffn=11008, n_heads=32, vocab_size=32000, max_seq_len=4096)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


LAYER_MATRICES = ("wq", "wk", "wv", "wo", "wg", "wu", "wd")


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    wg: np.ndarray
    wu: np.ndarray
    wd: np.ndarray
    attn_norm: np.ndarray
    ffn_norm: np.ndarray


@dataclass
class BackboneWeights:
    token_embedding: np.ndarray
    layers: list[LayerWeights]
    final_norm: np.ndarray
    lm_head: np.ndarray

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, precision="float64") -> "BackboneWeights":
        dt = resolve_dtype(precision)
        rng = Rng(seed)
        d, f = config.d_model, config.d_ffn

        def lin(n_in, n_out):
            return rng.normal((n_in, n_out), std=n_in ** -0.5, dtype=dt)

        layers = []
        for _ in range(config.n_layers):
            layers.append(LayerWeights(
                wq=lin(d, d), wk=lin(d, d), wv=lin(d, d), wo=lin(d, d),
                wg=lin(d, f), wu=lin(d, f), wd=lin(f, d),
                attn_norm=np.ones(d, dt), ffn_norm=np.ones(d, dt),
            ))
        return cls(
            token_embedding=rng.normal((config.vocab_size, d), dtype=dt),
            layers=layers,
            final_norm=np.ones(d, dt),
            lm_head=lin(d, config.vocab_size),
        )

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {"token_embedding": self.token_embedding}
        for i, lw in enumerate(self.layers):
            for f_ in fields(LayerWeights):
                out[f"layers.{i}.{f_.name}"] = getattr(lw, f_.name)
        out["final_norm"] = self.final_norm
        out["lm_head"] = self.lm_head
        return out

    @classmethod
    def from_named(cls, config: ModelConfig, arrays: dict) -> "BackboneWeights":
        try:
            layers = [
                LayerWeights(**{f_.name: arrays[f"layers.{i}.{f_.name}"] for f_ in fields(LayerWeights)})
                for i in range(config.n_layers)
            ]
            w = cls(arrays["token_embedding"], layers, arrays["final_norm"], arrays["lm_head"])
        except KeyError as exc:
            raise FormatError(f"missing weight array {exc.args[0]!r}") from None
        w.check(config)
        return w

    def map(self, fn) -> "BackboneWeights":
        named = {k: fn(k, v) for k, v in self.named_arrays().items()}
        layers = [LayerWeights(**{f_.name: named[f"layers.{i}.{f_.name}"] for f_ in fields(LayerWeights)})
                  for i in range(len(self.layers))]
        return BackboneWeights(named["token_embedding"], layers, named["final_norm"], named["lm_head"])

    def astype(self, precision) -> "BackboneWeights":
        dt = resolve_dtype(precision)
        return self.map(lambda _, v: np.ascontiguousarray(v, dtype=dt))

    def copy(self) -> "BackboneWeights":
        return self.map(lambda _, v: v.copy())

    def check(self, config: ModelConfig) -> None:
        d, f, vocab = config.d_model, config.d_ffn, config.vocab_size
        expect = {"token_embedding": (vocab, d), "final_norm": (d,), "lm_head": (d, vocab)}
        for i in range(config.n_layers):
            for nm in ("wq", "wk", "wv", "wo"):
                expect[f"layers.{i}.{nm}"] = (d, d)
            expect[f"layers.{i}.wg"] = (d, f)
            expect[f"layers.{i}.wu"] = (d, f)
            expect[f"layers.{i}.wd"] = (f, d)
            expect[f"layers.{i}.attn_norm"] = (d,)
            expect[f"layers.{i}.ffn_norm"] = (d,)
        named = self.named_arrays()
        if len(self.layers) != config.n_layers:
            raise ShapeError(f"weights have {len(self.layers)} layers, config says {config.n_layers}")
        for k, shape in expect.items():
            if F.value(named[k]).shape != shape:
                raise ShapeError(f"{k}: shape {F.value(named[k]).shape}, expected {shape}")

    @property
    def dtype(self):
        return self.token_embedding.dtype

    def to_bytes(self, config: ModelConfig) -> bytes:
        header = {"config": config.to_dict(), "precision": self.dtype.name}
        return formats.pack(formats.WEIGHTS_MAGIC, WEIGHTS_VERSION, header, self.named_arrays())

    @classmethod
    def from_bytes(cls, buf: bytes) -> tuple[ModelConfig, "BackboneWeights"]:
        header, arrays = formats.unpack(buf, formats.WEIGHTS_MAGIC, WEIGHTS_VERSION)
        config = ModelConfig.from_dict(header["config"])
        return config, cls.from_named(config, arrays)


def save_weights(path, config: ModelConfig, weights: BackboneWeights) -> None:
    """Write the binary weight file plus a ``<path>.json`` config sidecar."""
    path = os.fspath(path)
    with open(path, "wb") as fh:
        fh.write(weights.to_bytes(config))
    with open(path + ".json", "w") as fh:
        json.dump({"config": config.to_dict(), "precision": weights.dtype.name}, fh, indent=2, sort_keys=True)


def load_weights(path) -> tuple[ModelConfig, BackboneWeights]:
    path = os.fspath(path)
    with open(path, "rb") as fh:
        config, weights = BackboneWeights.from_bytes(fh.read())
    side = path + ".json"
    if os.path.exists(side):
        with open(side) as fh:
            meta = json.load(fh)
        if ModelConfig.from_dict(meta["config"]) != config:
            raise FormatError(f"{side} disagrees with the config block in {path}")
    return config, weights


class IdentityHooks:
    """Adapter hooks that leave the backbone untouched."""

    def begin_layer(self, layer, h, cache=None, pool_index=None):
        return None

    def project(self, layer, name, x, w):
        return F.matmul(x, w)

    def adjust(self, layer, name, x, state):
        return x


IDENTITY = IdentityHooks()


# ---------------------------------------------------------------------------
# kv cache


class KVCache:
    """Per-session keys/values, plus PARA adjusting vectors written once at prefill.

    Keys are stored transposed, ``(batch, heads, d_head, capacity)``, values as
    ``(batch, heads, capacity, d_head)``; attention reads the live prefix of
    these buffers in place. Buffers grow by doubling up to ``max_seq_len``.
    Cached values are post-adapter (V already scaled).
    """

    def __init__(self, config: ModelConfig, batch: int, dtype, capacity: int | None = None):
        self.config = config
        self.batch = batch
        self.dtype = np.dtype(dtype)
        self.capacity = min(capacity or 64, config.max_seq_len)
        n = config.n_layers
        self.keys_t: list = [None] * n
        self.values: list = [None] * n
        self.lengths = [0] * n
        self.vectors: list = [None] * n
        self.vg_calls = 0

    @property
    def length(self) -> int:
        return self.lengths[0]

    def keys(self, layer: int) -> np.ndarray:
        """Cached keys of one layer as ``(batch, heads, length, d_head)``."""
        return np.swapaxes(self.keys_t[layer][..., :self.lengths[layer]], -1, -2)

    def _grow(self, layer, cap):
        c = self.config
        kt = track(np.zeros((self.batch, c.n_heads, c.d_head, cap), dtype=self.dtype))
        v = track(np.zeros((self.batch, c.n_heads, cap, c.d_head), dtype=self.dtype))
        n = self.lengths[layer]
        if self.keys_t[layer] is not None:
            kt[..., :n] = self.keys_t[layer][..., :n]
            v[:, :, :n] = self.values[layer][:, :, :n]
        self.keys_t[layer], self.values[layer] = kt, v

    def append(self, layer: int, k: np.ndarray, v: np.ndarray):
        """Store ``(batch, heads, T, d_head)`` keys/values; returns ``(keys_t, values, length)`` buffers."""
        n = self.lengths[layer]
        new = n + k.shape[2]
        if new > self.config.max_seq_len:
            raise CacheOverflowError(f"cache length {new} would exceed max_seq_len={self.config.max_seq_len}")
        if k.shape[0] != self.batch:
            raise ShapeError(f"cache batch {self.batch}, got keys for batch {k.shape[0]}")
        buf = self.keys_t[layer]
        if buf is None:
            self._grow(layer, max(new, self.capacity))
        elif new > buf.shape[-1]:
            self._grow(layer, max(new, min(2 * buf.shape[-1], self.config.max_seq_len)))
        self.keys_t[layer][..., n:new] = np.swapaxes(k, -1, -2)
        self.values[layer][:, :, n:new] = v
        self.lengths[layer] = new
        return self.keys_t[layer], self.values[layer], new

    def reorder(self, index) -> None:
        """Gather batch rows (beam parents); duplicated rows are copied, never shared."""
        index = np.asarray(index)
        for i in range(self.config.n_layers):
            if self.keys_t[i] is not None:
                self.keys_t[i] = track(self.keys_t[i][index])
                self.values[i] = track(self.values[i][index])
            if self.vectors[i] is not None:
                self.vectors[i] = self.vectors[i].take(index)
        self.batch = len(index)

    @property
    def nbytes(self) -> int:
        return sum(b.nbytes for b in self.keys_t + self.values if b is not None)


# ---------------------------------------------------------------------------
# model


class Transformer:
    """Decoder-only transformer over frozen `BackboneWeights`.

    ``precision`` fixes the dtype of weights and activations for this engine.
    """

    def __init__(self, config: ModelConfig, weights: BackboneWeights | None = None,
                 precision="float64", seed: int = 0):
        self.config = config
        self.dtype = resolve_dtype(precision)
        if weights is None:
            weights = BackboneWeights.init(config, seed=seed, precision=self.dtype)
        weights.check(config)
        self.weights = weights.astype(self.dtype)
        self._tables()

    def _tables(self):
        c = self.config
        pos = np.arange(c.max_seq_len, dtype=np.float64)[:, None]
        if c.positional == "rope":
            half = c.d_head // 2
            inv = c.rope_base ** (-np.arange(half, dtype=np.float64) / half)
            ang = pos * inv[None, :]
            self._cos = np.cos(ang).astype(self.dtype)
            self._sin = np.sin(ang).astype(self.dtype)
        else:
            d = c.d_model
            i = np.arange(0, d, 2, dtype=np.float64)
            ang = pos / (10000.0 ** (i / d))
            pe = np.zeros((c.max_seq_len, d))
            pe[:, 0::2] = np.sin(ang)
            pe[:, 1::2] = np.cos(ang[:, : d // 2])
            self._pe = pe.astype(self.dtype)

    @classmethod
    def load(cls, path, precision=None) -> "Transformer":
        config, weights = load_weights(path)
        return cls(config, weights, precision=precision or weights.dtype)

    def save(self, path) -> None:
        save_weights(path, self.config, self.weights)

    # -- forward -------------------------------------------------------------

    def forward(self, tokens, *, adapter=None, cache: KVCache | None = None,
                pool_index=None, weights: BackboneWeights | None = None):
        """Logits for every input position, shape ``(batch, T, vocab)``.

        ``pool_index`` gives, per batch row, the position of the final prompt
        token inside ``tokens``; it is needed whenever a prompt-aware adapter
        has not yet written its vectors into ``cache``.
        """
        W = self.weights if weights is None else weights
        c = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        B, T = tokens.shape
        if T == 0:
            raise EmptyPromptError("forward called with no tokens")
        if tokens.min() < 0 or tokens.max() >= c.vocab_size:
            raise ShapeError(f"token ids must lie in [0, {c.vocab_size})")
        start = cache.length if cache is not None else 0
        if start + T > c.max_seq_len:
            raise CacheOverflowError(f"sequence length {start + T} exceeds max_seq_len={c.max_seq_len}")
        adapter = adapter if adapter is not None else IDENTITY

        h = F.embedding(W.token_embedding, tokens)
        if c.positional == "sinusoidal":
            h = F.add(h, self._pe[start:start + T])
        rot = (self._cos[start:start + T], self._sin[start:start + T]) if c.positional == "rope" else None
        q_pos = start + np.arange(T)[:, None]
        k_pos = np.arange(start + T)[None, :]
        mask = np.where(k_pos > q_pos, -np.inf, 0.0).astype(self.dtype)

        for li, lw in enumerate(W.layers):
            state = adapter.begin_layer(li, h, cache=cache, pool_index=pool_index)
            h = self._attention(li, lw, h, adapter, state, cache, rot, mask)
            h = self._ffn(li, lw, h, adapter, state)
        h = F.rmsnorm(h, W.final_norm, c.norm_eps)
        return F.matmul(h, W.lm_head)

    def _heads(self, x, B, T):
        c = self.config
        return F.swapaxes(F.reshape(x, (B, T, c.n_heads, c.d_head)), 1, 2)

    def _attention(self, li, lw, h, adapter, state, cache, rot, mask):
        c = self.config
        B, T = F.value(h).shape[:2]
        x = F.rmsnorm(h, lw.attn_norm, c.norm_eps)
        q = adapter.project(li, "q", x, lw.wq)
        k = adapter.project(li, "k", x, lw.wk)
        v = adapter.project(li, "v", x, lw.wv)
        # adapter scaling happens on the projection output, before rotation
        q = adapter.adjust(li, "q", q, state)
        k = adapter.adjust(li, "k", k, state)
        v = adapter.adjust(li, "v", v, state)
        q, k, v = self._heads(q, B, T), self._heads(k, B, T), self._heads(v, B, T)
        if rot is not None:
            q = F.rope(q, *rot)
            k = F.rope(k, *rot)
        if cache is not None:
            if isinstance(q, F.Var):
                raise RuntimeError("cached forward does not record gradients")
            kt_buf, v_buf, L = cache.append(li, F.value(k), v)
            scores = kernels.matmul_prefix(q, kt_buf, L)
            scores = track(scores * (1.0 / math.sqrt(c.d_head)) + mask)
            ctx = kernels.matmul_prefix(kernels.softmax_rows(scores), v_buf, c.d_head)
        else:
            scores = F.matmul(q, F.swapaxes(k, -1, -2))
            scores = F.add(F.scale(scores, 1.0 / math.sqrt(c.d_head)), mask)
            ctx = F.matmul(F.softmax(scores), v)
        ctx = F.reshape(F.swapaxes(ctx, 1, 2), (B, T, c.d_model))
        return F.add(h, adapter.project(li, "o", ctx, lw.wo))

    def _ffn(self, li, lw, h, adapter, state):
        c = self.config
        x = F.rmsnorm(h, lw.ffn_norm, c.norm_eps)
        g = adapter.project(li, "g", x, lw.wg)
        u = adapter.project(li, "u", x, lw.wu)
        u = adapter.adjust(li, "u", u, state)
        a = F.mul(F.activation(g, c.ffn_activation), u)
        a = adapter.adjust(li, "ff", a, state)
        return F.add(h, adapter.project(li, "d", a, lw.wd))

    # -- sessions and generation ----------------------------------------------

    def new_session(self, adapter=None, capacity: int | None = None) -> "Session":
        return Session(self, adapter, capacity)

    def generate(self, prompt, max_new_tokens: int, beam_size: int = 1, adapter=None,
                 use_cache: bool = True, session_hook=None) -> list[int]:
        return generate(self, prompt, max_new_tokens, beam_size, adapter, use_cache, session_hook)


class Session:
    """One request: a KV cache (batch 1 until beams expand it) and the adapter it runs with."""

    def __init__(self, model: Transformer, adapter=None, capacity: int | None = None):
        self.model = model
        self.adapter = adapter
        self.cache = KVCache(model.config, 1, model.dtype, capacity)
        self.prompt_len = 0

    @property
    def vg_calls(self) -> int:
        return self.cache.vg_calls

    def prefill(self, prompt) -> np.ndarray:
        """Run the prompt through the model; returns last-position logits ``(vocab,)``."""
        prompt = np.asarray(prompt, dtype=np.int64).reshape(-1)
        if prompt.size == 0:
            raise EmptyPromptError("prefill needs at least one prompt token")
        if self.cache.length:
            raise RuntimeError("session already prefilled")
        self.prompt_len = prompt.size
        logits = self.model.forward(prompt[None, :], adapter=self.adapter, cache=self.cache,
                                    pool_index=np.array([prompt.size - 1]))
        return logits[0, -1]

    def decode_step(self, tokens) -> np.ndarray:
        """Append one token per batch row; returns logits ``(batch, vocab)``."""
        if not self.cache.length:
            raise RuntimeError("decode_step before prefill")
        tokens = np.asarray(tokens, dtype=np.int64).reshape(-1, 1)
        return self.model.forward(tokens, adapter=self.adapter, cache=self.cache)[:, -1]


def log_softmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    s = x - x.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def generate(model: Transformer, prompt, max_new_tokens: int, beam_size: int = 1,
             adapter=None, use_cache: bool = True, session_hook=None) -> list[int]:
    """Greedy (``beam_size == 1``) or beam-search continuation of ``prompt``.

    Beams are ranked by length-normalised log-probability; ties go to the
    lower token id, then the lower parent beam index. With ``use_cache=False``
    every step recomputes the full sequence (the reference path for tests).
    """
    if beam_size < 1:
        raise ValueError(f"beam_size must be >= 1, got {beam_size}")
    if max_new_tokens < 0:
        raise ValueError("max_new_tokens must be >= 0")
    prompt = [int(t) for t in np.asarray(prompt).reshape(-1)]
    if not prompt:
        raise EmptyPromptError("generate needs a non-empty prompt")
    if max_new_tokens == 0:
        return []
    P = len(prompt)
    if P + max_new_tokens - 1 > model.config.max_seq_len:
        raise CacheOverflowError(
            f"prompt {P} + {max_new_tokens} new tokens exceeds max_seq_len={model.config.max_seq_len}")

    if use_cache:
        session = Session(model, adapter, capacity=P + max_new_tokens)
        if session_hook is not None:
            session_hook(session)
        first = session.prefill(prompt)[None, :]

        def step(last_tokens, parents):
            if parents is not None:
                session.cache.reorder(parents)
            return session.decode_step(last_tokens)
    else:
        first = None

        def step(_last, _parents, seqs=None):
            batch = np.array([prompt + s for s in seqs], dtype=np.int64)
            return model.forward(batch, adapter=adapter, pool_index=np.full(len(seqs), P - 1))[:, -1]

    if beam_size == 1:
        out: list[int] = []
        logits = first if use_cache else step(None, None, seqs=[out])
        for i in range(max_new_tokens):
            tok = int(np.argmax(logits[0]))
            out.append(tok)
            if i + 1 < max_new_tokens:
                logits = step([tok], None) if use_cache else step(None, None, seqs=[out])
        return out

    seqs: list[list[int]] = [[]]
    scores = np.zeros(1)
    logits = first if use_cache else step(None, None, seqs=seqs)
    for i in range(max_new_tokens):
        total = scores[:, None] + log_softmax(logits)
        nb, V = total.shape
        flat = total.reshape(-1)
        parent = np.repeat(np.arange(nb), V)
        token = np.tile(np.arange(V), nb)
        norm = flat / (i + 1)
        order = np.lexsort((parent, token, -norm))[:beam_size]
        seqs = [seqs[p] + [int(t)] for p, t in zip(parent[order], token[order])]
        scores = flat[order]
        if i + 1 < max_new_tokens:
            if use_cache:
                logits = step(token[order], parent[order])
            else:
                logits = step(None, None, seqs=seqs)
    norm = scores / max_new_tokens
    best = np.lexsort((np.arange(len(seqs)), -norm))[0]
    return seqs[best]
