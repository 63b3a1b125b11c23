"""Prompt-aware adjusting-vector adapters (and LoRA / IA3 baselines) over a frozen numpy decoder."""
from .backbone import KVCache, ModelConfig, Session, Transformer, generate
from .errors import ParalmError
from .peft import (IA3Adapter, LoRAAdapter, PARAAdapter, count_params, deserialize_adapter, load_adapter,
                   make_adapter, save_adapter, serialize_adapter)
from .serving import BenchSpec, TenantRegistry, flop_model, run_bench
from .training import TrainConfig, make_task, train

__version__ = "0.1.0"

__all__ = [
    "BenchSpec", "IA3Adapter", "KVCache", "LoRAAdapter", "ModelConfig", "PARAAdapter", "ParalmError", "Session",
    "TenantRegistry", "TrainConfig", "Transformer", "count_params", "deserialize_adapter", "flop_model",
    "generate", "load_adapter", "make_adapter", "make_task", "run_bench", "save_adapter", "serialize_adapter",
    "train",
]
