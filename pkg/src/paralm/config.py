"""Run configuration: one YAML document describing model, adapter, task, training and bench.

Schema (every section optional, defaults shown)::

    seed: 0
    precision: float64            # float32 | float64
    output_dir: runs/default
    model:
      path: null                  # existing weight file; otherwise built from `config`
      config: desk                # preset name (desk, bench, llama2_7b) or a mapping of
                                  # ModelConfig fields, optionally with `preset:` as the base
      pretrain: null              # copy-pretraining for `init`: true, or a mapping overriding
                                  # prompt_len, n_train, n_dev, n_test, lr, batch_size, max_steps
    adapter:
      method: para                # none | para | lora | ia3
      path: null                  # adapter file for `generate`
      r: 12
      rank: 16
      alpha: 16.0
      targets: [q, v]
    task: {name: shift_k, n_train: 1000, n_dev: 100, n_test: 200, prompt_len: 8,
           alphabet: 10, k: 1, n_keys: 2, seed: 0}
    train: {lr: 0.01, batch_size: 16, max_epochs: 10, patience: 10, warmup_fraction: 0.06,
            eval_every: null, max_steps: null}
    bench: {prompt_length: 274, max_new_tokens: 32, beam_sizes: [1, 3], repetitions: 100,
            warmup_runs: 5, methods: [para, lora, ia3], adapters: {}}
    gradcheck: {n_layers: 2, d_model: 8, n_heads: 2, d_ffn: 12, vocab_size: 16, eps: 1e-4,
                tolerance: 1e-5, batch: 2, prompt_len: 4, target_len: 3}
"""
from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field

import yaml

from .backbone import ModelConfig
from .errors import ParalmError
from .peft import METHODS


class ConfigError(ParalmError, ValueError):
    """Invalid run configuration; the message names the field and, when known, the line."""


PRESETS = {"desk": ModelConfig.desk, "bench": ModelConfig.bench, "llama2_7b": ModelConfig.llama2_7b}

DEFAULTS = {
    "seed": 0,
    "precision": "float64",
    "output_dir": "runs/default",
    "model": {"path": None, "config": "desk", "pretrain": None},
    "adapter": {"method": "para", "path": None, "r": 12, "rank": 16, "alpha": 16.0, "targets": ["q", "v"]},
    "task": {"name": "shift_k", "n_train": 1000, "n_dev": 100, "n_test": 200, "prompt_len": 8,
             "alphabet": 10, "k": 1, "n_keys": 2, "seed": 0},
    "train": {"lr": 1e-2, "batch_size": 16, "max_epochs": 10, "patience": 10, "warmup_fraction": 0.06,
              "eval_every": None, "max_steps": None},
    "bench": {"prompt_length": 274, "max_new_tokens": 32, "beam_sizes": [1, 3], "repetitions": 100,
              "warmup_runs": 5, "methods": ["para", "lora", "ia3"], "adapters": {}},
    "gradcheck": {"n_layers": 2, "d_model": 8, "n_heads": 2, "d_ffn": 12, "vocab_size": 16, "eps": 1e-4,
                  "tolerance": 1e-5, "batch": 2, "prompt_len": 4, "target_len": 3},
}

# sections whose values are free-form mappings rather than fixed schemas
_OPEN = {("model", "config"), ("model", "pretrain"), ("bench", "adapters")}


def _line_map(node, path=(), out=None):
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            p = path + (k.value,)
            out[p] = k.start_mark.line + 1
            _line_map(v, p, out)
    return out


def _merge(defaults, given, path, lines):
    if not isinstance(given, dict):
        raise ConfigError(_where(path, lines) + f"'{'.'.join(path)}' must be a mapping")
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        p = path + (k,)
        if k not in defaults:
            raise ConfigError(_where(p, lines) + f"unknown field '{'.'.join(p)}'")
        if isinstance(defaults[k], dict) and p not in _OPEN:
            out[k] = _merge(defaults[k], v if v is not None else {}, p, lines)
        else:
            out[k] = v
    return out


def _where(path, lines):
    line = lines.get(tuple(path))
    return f"line {line}: " if line else ""


@dataclass
class RunConfig:
    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    lines: dict = field(default_factory=dict)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        try:
            node = yaml.compose(text)
            raw = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f"line {mark.line + 1}: " if mark is not None else ""
            raise ConfigError(f"{where}unparseable config: {getattr(exc, 'problem', exc)}") from None
        lines = _line_map(node) if node is not None else {}
        cfg = cls(_merge(DEFAULTS, raw or {}, (), lines), lines)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_text(fh.read())

    def dump(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=True)

    def __getitem__(self, key):
        return self.data[key]

    def _fail(self, path, msg):
        raise ConfigError(_where(path, self.lines) + f"{'.'.join(path)}: {msg}")

    def validate(self) -> None:
        d = self.data
        if d["precision"] not in ("float32", "float64"):
            self._fail(("precision",), f"expected float32 or float64, got {d['precision']!r}")
        if not isinstance(d["seed"], int) or d["seed"] < 0:
            self._fail(("seed",), f"expected a non-negative integer, got {d['seed']!r}")
        if d["adapter"]["method"] not in METHODS:
            self._fail(("adapter", "method"), f"expected one of {list(METHODS)}, got {d['adapter']['method']!r}")
        for m in d["bench"]["methods"]:
            if m not in d["bench"]["adapters"] and m not in METHODS:
                self._fail(("bench", "methods"), f"unknown method {m!r}")
        self.model_config()

    def model_config(self) -> ModelConfig:
        spec = self.data["model"]["config"]
        path = ("model", "config")
        try:
            if isinstance(spec, str):
                if spec not in PRESETS:
                    self._fail(path, f"unknown preset {spec!r}; expected one of {sorted(PRESETS)}")
                return PRESETS[spec]()
            if not isinstance(spec, dict):
                self._fail(path, "expected a preset name or a mapping")
            spec = dict(spec)
            base = spec.pop("preset", None)
            names = {f.name for f in dataclasses.fields(ModelConfig)}
            for k in spec:
                if k not in names:
                    self._fail(path + (k,), f"unknown model field {k!r}")
            if base is not None:
                if base not in PRESETS:
                    self._fail(path + ("preset",), f"unknown preset {base!r}")
                return PRESETS[base](**spec)
            return ModelConfig(**spec)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            self._fail(path, str(exc))

    def adapter_hyper(self) -> dict:
        a = self.data["adapter"]
        if a["method"] == "para":
            return {"r": a["r"]}
        if a["method"] == "lora":
            return {"rank": a["rank"], "alpha": float(a["alpha"]), "targets": tuple(a["targets"])}
        return {}
