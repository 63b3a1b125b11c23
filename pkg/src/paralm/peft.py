"""Adapters over a frozen backbone: PARA, LoRA (un-merged) and (IA)3.

An adapter plugs into `Transformer.forward` through three hooks:

* ``begin_layer`` runs before a layer's attention and may return per-request
  state (PARA's adjusting vectors);
* ``project`` computes ``x @ W`` for a named projection (LoRA adds its delta);
* ``adjust`` rescales a projection output or the FFN intermediate.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as F
from . import formats
from .backbone import IdentityHooks, ModelConfig
from .errors import (ConfigMismatchError, EmptyPromptError, FormatError, MethodMismatchError, ShapeError,
                     UnknownMethodError)
from .tensor import Rng, resolve_dtype, track

ADAPTER_VERSION = 1
METHODS = ("none", "para", "lora", "ia3")
SPLIT_ORDER = ("l_q", "l_v", "l_u")
PROJECTIONS = ("q", "k", "v", "o", "g", "u", "d")


@dataclass
class AdjustingVectors:
    """Per-request scaling vectors for one layer; rows index the batch."""

    l_q: np.ndarray
    l_v: np.ndarray
    l_u: np.ndarray

    def take(self, index) -> "AdjustingVectors":
        return AdjustingVectors(track(self.l_q[index]), track(self.l_v[index]), track(self.l_u[index]))


def pooler(prompt_hidden):
    """Hidden state of the final prompt token."""
    h = F.value(prompt_hidden)
    if h.ndim != 2:
        raise ShapeError(f"pooler expects (T, d_model), got {h.shape}")
    if h.shape[0] == 0:
        raise EmptyPromptError("pooler is undefined for an empty prompt")
    return F.getitem(prompt_hidden, h.shape[0] - 1)


def _vector_generator(block: dict, pooled, d_model: int, activation: str):
    """``gelu(pooled @ W_down) @ W_up + b_up`` split into (l_q, l_v, l_u)."""
    z = F.activation(F.matmul(pooled, block["w_down"]), activation)
    out = F.add(F.matmul(z, block["w_up"]), block["b_up"])
    d = d_model
    parts = (
        F.getitem(out, (Ellipsis, slice(0, d))),
        F.getitem(out, (Ellipsis, slice(d, 2 * d))),
        F.getitem(out, (Ellipsis, slice(2 * d, None))),
    )
    return AdjustingVectors(*parts)


def generate_vectors(block: dict, prompt_hidden, activation: str = "gelu") -> AdjustingVectors:
    """Adjusting vectors from one prompt's hidden states ``(T, d_model)``."""
    h = F.value(prompt_hidden)
    d_model = block["w_down"].shape[0]
    if h.ndim != 2 or h.shape[1] != d_model:
        raise ShapeError(f"prompt hidden states {h.shape} do not match d_model={d_model}")
    pooled = pooler(prompt_hidden)
    vec = _vector_generator(block, F.reshape(pooled, (1, d_model)), d_model, activation)
    return AdjustingVectors(*(F.reshape(v, (F.value(v).shape[-1],)) for v in (vec.l_q, vec.l_v, vec.l_u)))


def apply_q(l_q, Q):
    return F.scale_rows(Q, l_q)


apply_v = apply_q
apply_u = apply_q


def lora_forward(x, W, A, B, scaling: float):
    """Un-merged LoRA: ``x @ W + scaling * (x @ A) @ B``."""
    if F.value(A).shape[1] != F.value(B).shape[0]:
        raise ShapeError(f"LoRA factors {F.value(A).shape} and {F.value(B).shape} disagree on rank")
    base = F.matmul(x, W)
    return F.add(base, F.scale(F.matmul(F.matmul(x, A), B), scaling))


# ---------------------------------------------------------------------------
# adapter sets


class AdapterSet(IdentityHooks):
    """Identity adapter; the base of the tagged union over methods.

    ``layers`` holds one dict of named parameter arrays per transformer layer.
    """

    method = "none"

    def __init__(self, config: ModelConfig, layers=None, hyper=None, metadata=None):
        self.config = config
        self.layers = layers if layers is not None else [{} for _ in range(config.n_layers)]
        self.hyper = dict(hyper or {})
        self.metadata = dict(metadata or {})
        if len(self.layers) != config.n_layers:
            raise ShapeError(f"adapter has {len(self.layers)} layer blocks, model has {config.n_layers}")

    # parameters
    def params(self) -> dict:
        return {f"layers.{i}.{k}": v for i, blk in enumerate(self.layers) for k, v in blk.items()}

    def with_params(self, named: dict) -> "AdapterSet":
        layers = [dict(blk) for blk in self.layers]
        for key, v in named.items():
            _, i, k = key.split(".", 2)
            layers[int(i)][k] = v
        return type(self)(self.config, layers, self.hyper, self.metadata)

    def astype(self, precision) -> "AdapterSet":
        dt = resolve_dtype(precision)
        return self.with_params({k: np.ascontiguousarray(v, dtype=dt) for k, v in self.params().items()})

    def copy(self) -> "AdapterSet":
        return self.with_params({k: np.array(v, copy=True) for k, v in self.params().items()})

    @property
    def n_params(self) -> int:
        return int(sum(np.asarray(F.value(v)).size for v in self.params().values()))

    def check(self, config: ModelConfig) -> None:
        for field in ("n_layers", "d_model", "d_ffn"):
            a, b = getattr(config, field), getattr(self.config, field)
            if a != b:
                raise ConfigMismatchError(field, a, b)

    def is_matrix(self, key: str) -> bool:
        return np.asarray(F.value(self.params()[key])).ndim >= 2

    def __repr__(self):
        return f"{type(self).__name__}(n_layers={self.config.n_layers}, hyper={self.hyper}, n_params={self.n_params})"


class PARAAdapter(AdapterSet):
    """Prompt-aware vector generators installed before every layer."""

    method = "para"

    @classmethod
    def init(cls, config: ModelConfig, r: int = 12, seed: int = 0, precision="float64",
             activation: str = "gelu", metadata=None) -> "PARAAdapter":
        if r < 1:
            raise ValueError(f"bottleneck r must be >= 1, got {r}")
        dt = resolve_dtype(precision)
        rng = Rng(seed)
        d_out = 2 * config.d_model + config.d_ffn
        layers = [{
            "w_down": rng.normal((config.d_model, r), std=0.02, dtype=dt),
            "w_up": np.zeros((r, d_out), dt),
            "b_up": np.ones(d_out, dt),
        } for _ in range(config.n_layers)]
        return cls(config, layers, {"r": r, "activation": activation}, metadata)

    @property
    def d_out(self) -> int:
        return 2 * self.config.d_model + self.config.d_ffn

    def begin_layer(self, layer, h, cache=None, pool_index=None):
        if cache is not None and cache.vectors[layer] is not None:
            return cache.vectors[layer]
        hv = F.value(h)
        B, T = hv.shape[:2]
        idx = np.full(B, T - 1) if pool_index is None else np.asarray(pool_index).reshape(-1)
        if idx.shape[0] != B or idx.min() < 0 or idx.max() >= T:
            raise ShapeError(f"pool_index {idx} invalid for hidden states of shape {hv.shape}")
        pooled = F.getitem(h, (np.arange(B), idx))
        vec = _vector_generator(self.layers[layer], pooled, self.config.d_model, self.hyper.get("activation", "gelu"))
        if cache is not None:
            cache.vectors[layer] = AdjustingVectors(*(F.value(v) for v in (vec.l_q, vec.l_v, vec.l_u)))
            cache.vg_calls += 1
        return vec

    def adjust(self, layer, name, x, state):
        if name == "q":
            return F.scale_rows_(x, state.l_q)
        if name == "v":
            return F.scale_rows_(x, state.l_v)
        if name == "u":
            return F.scale_rows_(x, state.l_u)
        return x


class LoRAAdapter(AdapterSet):
    """Low-rank deltas evaluated un-merged at every step."""

    method = "lora"

    @classmethod
    def init(cls, config: ModelConfig, rank: int = 16, alpha: float = 16.0, targets=("q", "v"),
             seed: int = 0, precision="float64", metadata=None) -> "LoRAAdapter":
        if rank < 1:
            raise ValueError(f"rank must be >= 1, got {rank}")
        bad = set(targets) - set(PROJECTIONS)
        if bad:
            raise ValueError(f"unknown LoRA targets {sorted(bad)}")
        dt = resolve_dtype(precision)
        rng = Rng(seed)
        layers = []
        for _ in range(config.n_layers):
            blk = {}
            for t in targets:
                d_in, d_out = _proj_dims(config, t)
                blk[f"{t}.A"] = rng.normal((d_in, rank), std=d_in ** -0.5, dtype=dt)
                blk[f"{t}.B"] = np.zeros((rank, d_out), dt)
            layers.append(blk)
        hyper = {"rank": rank, "alpha": float(alpha), "targets": list(targets)}
        return cls(config, layers, hyper, metadata)

    @property
    def scaling(self) -> float:
        return self.hyper["alpha"] / self.hyper["rank"]

    def project(self, layer, name, x, w):
        blk = self.layers[layer]
        a = blk.get(f"{name}.A")
        if a is None:
            return F.matmul(x, w)
        b = blk[f"{name}.B"]
        if F.value(a).shape[1] != F.value(b).shape[0]:
            raise ShapeError(f"LoRA factors {F.value(a).shape} and {F.value(b).shape} disagree on rank")
        # same arithmetic as lora_forward, reusing the fresh temporaries
        return F.add_(F.matmul(x, w), F.scale_(F.matmul(F.matmul(x, a), b), self.scaling))

    def merged_weight(self, layer, name, w):
        blk = self.layers[layer]
        return w + self.scaling * (blk[f"{name}.A"] @ blk[f"{name}.B"])


class IA3Adapter(AdapterSet):
    """Static learned vectors on K, V and the FFN intermediate."""

    method = "ia3"

    @classmethod
    def init(cls, config: ModelConfig, precision="float64", metadata=None, seed: int = 0) -> "IA3Adapter":
        dt = resolve_dtype(precision)
        layers = [{"l_k": np.ones(config.d_model, dt), "l_v": np.ones(config.d_model, dt),
                   "l_ff": np.ones(config.d_ffn, dt)} for _ in range(config.n_layers)]
        return cls(config, layers, {}, metadata)

    def adjust(self, layer, name, x, state):
        blk = self.layers[layer]
        if name == "k":
            return F.scale_rows_(x, blk["l_k"])
        if name == "v":
            return F.scale_rows_(x, blk["l_v"])
        if name == "ff":
            return F.scale_rows_(x, blk["l_ff"])
        return x


ADAPTER_CLASSES = {"none": AdapterSet, "para": PARAAdapter, "lora": LoRAAdapter, "ia3": IA3Adapter}


def _proj_dims(config: ModelConfig, name: str) -> tuple[int, int]:
    d, f = config.d_model, config.d_ffn
    return {"q": (d, d), "k": (d, d), "v": (d, d), "o": (d, d), "g": (d, f), "u": (d, f), "d": (f, d)}[name]


def make_adapter(method: str, config: ModelConfig, seed: int = 0, precision="float64", metadata=None,
                 **hyper) -> AdapterSet:
    if method == "none":
        return AdapterSet(config, metadata=metadata)
    if method == "para":
        return PARAAdapter.init(config, seed=seed, precision=precision, metadata=metadata, **hyper)
    if method == "lora":
        return LoRAAdapter.init(config, seed=seed, precision=precision, metadata=metadata, **hyper)
    if method == "ia3":
        return IA3Adapter.init(config, precision=precision, metadata=metadata)
    raise UnknownMethodError(f"unknown adapter method {method!r}; expected one of {METHODS}")


def randomize(adapter: AdapterSet, seed: int, std: float = 0.1) -> AdapterSet:
    """Copy with every parameter perturbed by Gaussian noise (used to leave the identity point)."""
    rng = Rng(seed)
    return adapter.with_params({k: (v + rng.normal(v.shape, std=std, dtype=v.dtype))
                                for k, v in adapter.params().items()})


# ---------------------------------------------------------------------------
# parameter counting


def param_breakdown(config: ModelConfig, method: str, r: int = 12, rank: int = 16,
                    targets=("q", "v")) -> dict:
    """``{"headline": ..., "bias": ..., "total": ...}`` tunable-parameter counts."""
    L, d, f = config.n_layers, config.d_model, config.d_ffn
    if method == "none":
        return {"headline": 0, "bias": 0, "total": 0}
    if method == "para":
        if r < 1:
            raise ValueError(f"bottleneck r must be >= 1, got {r}")
        weights = L * (d * r + r * (2 * d + f))
        bias = L * (2 * d + f)
        return {"headline": weights, "bias": bias, "total": weights + bias}
    if method == "lora":
        if rank < 1:
            raise ValueError(f"rank must be >= 1, got {rank}")
        n = L * sum(rank * sum(_proj_dims(config, t)) for t in targets)
        return {"headline": n, "bias": 0, "total": n}
    if method == "ia3":
        n = L * (2 * d + f)
        return {"headline": n, "bias": 0, "total": n}
    raise UnknownMethodError(f"unknown adapter method {method!r}; expected one of {METHODS}")


def count_params(config: ModelConfig, method: str, **hyper) -> int:
    """Headline tunable-parameter count (PARA excludes the ``b_up`` biases)."""
    return param_breakdown(config, method, **hyper)["headline"]


# ---------------------------------------------------------------------------
# serialization


def serialize_adapter(adapter: AdapterSet) -> bytes:
    c = adapter.config
    header = {
        "method": adapter.method,
        "config": {"n_layers": c.n_layers, "d_model": c.d_model, "d_ffn": c.d_ffn},
        "hyper": adapter.hyper,
        "metadata": adapter.metadata,
    }
    if adapter.method == "para":
        header["split_order"] = list(SPLIT_ORDER)
    arrays = {k: np.asarray(F.value(v)) for k, v in adapter.params().items()}
    return formats.pack(formats.ADAPTER_MAGIC, ADAPTER_VERSION, header, arrays)


def deserialize_adapter(buf: bytes, config: ModelConfig | None = None, method: str | None = None) -> AdapterSet:
    """Decode an adapter; validates method tag and, if given, the backbone dims."""
    header, arrays = formats.unpack(buf, formats.ADAPTER_MAGIC, ADAPTER_VERSION)
    tag = header.get("method")
    if tag not in ADAPTER_CLASSES:
        raise MethodMismatchError(f"unknown method tag {tag!r}")
    if method is not None and tag != method:
        raise MethodMismatchError(f"expected a {method!r} adapter, file holds {tag!r}")
    if tag == "para" and tuple(header.get("split_order", ())) != SPLIT_ORDER:
        raise FormatError(f"unsupported split order {header.get('split_order')}")
    dims = header["config"]
    if config is not None:
        for field in ("n_layers", "d_model", "d_ffn"):
            if dims[field] != getattr(config, field):
                raise ConfigMismatchError(field, getattr(config, field), dims[field])
        model_config = config
    else:
        model_config = ModelConfig(n_layers=dims["n_layers"], d_model=dims["d_model"], d_ffn=dims["d_ffn"],
                                   n_heads=1, vocab_size=1, positional="sinusoidal")
    layers = [{} for _ in range(dims["n_layers"])]
    for key, arr in arrays.items():
        try:
            _, i, k = key.split(".", 2)
            layers[int(i)][k] = arr
        except (ValueError, IndexError):
            raise FormatError(f"bad array name {key!r}") from None
    adapter = ADAPTER_CLASSES[tag](model_config, layers, header.get("hyper"), header.get("metadata"))
    _check_shapes(adapter)
    return adapter


def _check_shapes(adapter: AdapterSet) -> None:
    c = adapter.config
    for i, blk in enumerate(adapter.layers):
        if adapter.method == "para":
            r = adapter.hyper["r"]
            want = {"w_down": (c.d_model, r), "w_up": (r, 2 * c.d_model + c.d_ffn), "b_up": (2 * c.d_model + c.d_ffn,)}
        elif adapter.method == "ia3":
            want = {"l_k": (c.d_model,), "l_v": (c.d_model,), "l_ff": (c.d_ffn,)}
        elif adapter.method == "lora":
            rank = adapter.hyper["rank"]
            want = {}
            for t in adapter.hyper["targets"]:
                d_in, d_out = _proj_dims(c, t)
                want[f"{t}.A"] = (d_in, rank)
                want[f"{t}.B"] = (rank, d_out)
        else:
            want = {}
        if set(blk) != set(want):
            raise FormatError(f"layer {i}: parameters {sorted(blk)} do not match {adapter.method} layout {sorted(want)}")
        for k, shape in want.items():
            if blk[k].shape != shape:
                raise ConfigMismatchError(f"layers.{i}.{k} shape", shape, blk[k].shape)


def adapters_equal(a: AdapterSet, b: AdapterSet) -> bool:
    """Bitwise equality of method, hyper-parameters, metadata and every array."""
    if a.method != b.method or a.hyper != b.hyper or a.metadata != b.metadata:
        return False
    pa, pb = a.params(), b.params()
    if list(pa) != list(pb):
        return False
    return all(np.asarray(pa[k]).dtype == np.asarray(pb[k]).dtype
               and np.asarray(pa[k]).tobytes() == np.asarray(pb[k]).tobytes() for k in pa)


def save_adapter(path, adapter: AdapterSet) -> None:
    """Binary adapter file plus a ``<path>.json`` metadata sidecar."""
    path = os.fspath(path)
    with open(path, "wb") as fh:
        fh.write(serialize_adapter(adapter))
    side = {"method": adapter.method, "hyper": adapter.hyper, "metadata": adapter.metadata,
            "n_params": adapter.n_params}
    with open(path + ".json", "w") as fh:
        json.dump(side, fh, indent=2, sort_keys=True)


def load_adapter(path, config: ModelConfig | None = None, method: str | None = None) -> AdapterSet:
    with open(os.fspath(path), "rb") as fh:
        return deserialize_adapter(fh.read(), config=config, method=method)
