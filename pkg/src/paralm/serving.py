"""Multi-tenant serving over one frozen backbone, plus the latency/memory benchmark."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import statistics
import threading
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .backbone import ModelConfig, Session, Transformer, generate
from .errors import (CacheOverflowError, DuplicateTenantError, ParalmError, UnknownMethodError,
                     UnknownTenantError)
from .peft import AdapterSet, load_adapter
from .tensor import ALLOC, Rng


class TenantRegistry:
    """Tenant id -> adapter set, all sharing one backbone.

    Registration is exclusive; resolution may run concurrently from many threads.
    """

    def __init__(self, model: Transformer):
        self.model = model
        self._adapters: dict[str, AdapterSet] = {}
        self._lock = threading.Lock()

    def register_tenant(self, tenant_id: str, adapter) -> AdapterSet:
        """Add a tenant from an `AdapterSet` or an adapter file path."""
        if not isinstance(adapter, AdapterSet):
            adapter = load_adapter(adapter)
        adapter.check(self.model.config)
        adapter = adapter.astype(self.model.dtype)
        with self._lock:
            if tenant_id in self._adapters:
                raise DuplicateTenantError(f"tenant {tenant_id!r} is already registered")
            # rebinding the dict keeps concurrent readers on a consistent snapshot
            self._adapters = {**self._adapters, tenant_id: adapter}
        return adapter

    def adapter(self, tenant_id: str) -> AdapterSet:
        try:
            return self._adapters[tenant_id]
        except KeyError:
            raise UnknownTenantError(f"unknown tenant {tenant_id!r}") from None

    def resolve(self, tenant_id: str):
        """Factory producing a fresh `Session` per request for this tenant."""
        adapter = self.adapter(tenant_id)

        def new_session(capacity: int | None = None) -> Session:
            return Session(self.model, adapter, capacity)

        return new_session

    def generate(self, tenant_id: str, prompt, max_new_tokens: int, beam_size: int = 1) -> list[int]:
        return generate(self.model, prompt, max_new_tokens, beam_size, adapter=self.adapter(tenant_id))

    @property
    def tenants(self) -> list[str]:
        return sorted(self._adapters)

    def __contains__(self, tenant_id) -> bool:
        return tenant_id in self._adapters

    def __len__(self) -> int:
        return len(self._adapters)


# ---------------------------------------------------------------------------
# timers


class MonotonicTimer:
    name = "monotonic"

    def now(self) -> float:
        return time.perf_counter()


class StubTimer:
    """Deterministic clock: every reading advances by ``tick`` seconds."""

    name = "stub"

    def __init__(self, tick: float = 0.5):
        self.tick = tick
        self.t = 0.0

    def now(self) -> float:
        self.t += self.tick
        return self.t


# ---------------------------------------------------------------------------
# benchmark


@dataclass
class BenchSpec:
    prompt_length: int = 274
    max_new_tokens: int = 32
    beam_sizes: tuple = (1, 3)
    repetitions: int = 100
    warmup_runs: int = 5
    methods: tuple = ("para", "lora", "ia3")
    seed: int = 0

    def __post_init__(self):
        self.beam_sizes = tuple(self.beam_sizes)
        self.methods = tuple(self.methods)
        if self.repetitions < 1:
            raise ValueError(f"repetitions must be >= 1, got {self.repetitions}")
        if self.warmup_runs < 0 or self.prompt_length < 1 or self.max_new_tokens < 1:
            raise ValueError("warmup_runs must be >= 0, prompt_length and max_new_tokens >= 1")
        if not self.beam_sizes or min(self.beam_sizes) < 1:
            raise ValueError(f"beam sizes must be >= 1, got {self.beam_sizes}")
        if not self.methods:
            raise ValueError("no methods to benchmark")

    def validate(self, config: ModelConfig) -> None:
        need = self.prompt_length + self.max_new_tokens * max(self.beam_sizes)
        if need > config.max_seq_len:
            raise CacheOverflowError(
                f"prompt_length + max_new_tokens * beam = {need} exceeds max_seq_len={config.max_seq_len}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["beam_sizes"] = list(self.beam_sizes)
        d["methods"] = list(self.methods)
        return d


@dataclass
class BenchCell:
    tenant: str
    method: str
    beam: int
    tps_mean: float
    tps_median: float
    tps_stdev: float
    samples: list
    peak_bytes: int
    vg_calls: int
    tokens: list


@dataclass
class BenchReport:
    cells: list
    metadata: dict = field(default_factory=dict)

    def cell(self, tenant: str, beam: int) -> BenchCell:
        for c in self.cells:
            if c.tenant == tenant and c.beam == beam:
                return c
        raise KeyError((tenant, beam))

    def to_dict(self, timing: bool = True) -> dict:
        cells = []
        for c in self.cells:
            d = asdict(c)
            if not timing:
                for k in ("tps_mean", "tps_median", "tps_stdev", "samples"):
                    d.pop(k)
            cells.append(d)
        return {"cells": cells, "metadata": self.metadata}

    def to_json(self, timing: bool = True) -> str:
        return json.dumps(self.to_dict(timing), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tenant", "method", "beam", "tps_mean", "tps_median", "tps_stdev", "n_samples",
                    "peak_bytes", "vg_calls"])
        for c in self.cells:
            w.writerow([c.tenant, c.method, c.beam, f"{c.tps_mean:.6g}", f"{c.tps_median:.6g}",
                        f"{c.tps_stdev:.6g}", len(c.samples), c.peak_bytes, c.vg_calls])
        return buf.getvalue()

    def write(self, out_dir, stem: str = "bench") -> tuple[str, str]:
        os.makedirs(out_dir, exist_ok=True)
        jp = os.path.join(out_dir, f"{stem}.json")
        cp = os.path.join(out_dir, f"{stem}.csv")
        with open(jp, "w") as fh:
            fh.write(self.to_json())
        with open(cp, "w") as fh:
            fh.write(self.to_csv())
        return jp, cp


def config_hash(config: ModelConfig) -> str:
    return hashlib.sha256(json.dumps(config.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def bench_prompt(spec: BenchSpec, config: ModelConfig) -> np.ndarray:
    return Rng(spec.seed).integers(0, config.vocab_size, size=spec.prompt_length)


def _one_run(registry, tenant, prompt, spec, beam, timer):
    sessions = []
    adapter = registry.adapter(tenant)
    t0 = timer.now()
    out = generate(registry.model, prompt, spec.max_new_tokens, beam, adapter=adapter,
                   session_hook=sessions.append)
    t1 = timer.now()
    return out, t1 - t0, sessions[0].vg_calls


def run_bench(spec: BenchSpec, registry: TenantRegistry, timer=None, progress=None) -> BenchReport:
    """Time prefill + decode for every (tenant, beam) cell on one shared prompt.

    Repetitions are interleaved across tenants so slow drifts in machine
    speed hit every method alike. Peak allocation is measured in a separate
    untimed pass because allocation tracking itself costs time.
    """
    timer = timer or MonotonicTimer()
    model = registry.model
    spec.validate(model.config)
    for t in spec.methods:
        if t not in registry:
            raise UnknownTenantError(f"benchmark method {t!r} has no registered tenant")
    prompt = bench_prompt(spec, model.config)
    cells = []
    for beam in spec.beam_sizes:
        reference = {}
        for t in spec.methods:
            with ALLOC.window() as win:
                out, _, vg = _one_run(registry, t, prompt, spec, beam, MonotonicTimer())
            reference[t] = (out, vg, win.peak_delta)
        for _ in range(spec.warmup_runs):
            for t in spec.methods:
                _one_run(registry, t, prompt, spec, beam, timer)
        samples = {t: [] for t in spec.methods}
        for rep in range(spec.repetitions):
            for t in spec.methods:
                out, dt, vg = _one_run(registry, t, prompt, spec, beam, timer)
                if out != reference[t][0] or vg != reference[t][1]:
                    raise ParalmError(f"tenant {t!r} produced different output during timing")
                samples[t].append(spec.max_new_tokens / dt)
            if progress:
                progress(beam, rep)
        for t in spec.methods:
            s = samples[t]
            cells.append(BenchCell(
                tenant=t, method=registry.adapter(t).method, beam=beam,
                tps_mean=statistics.fmean(s), tps_median=statistics.median(s),
                tps_stdev=statistics.stdev(s) if len(s) > 1 else 0.0, samples=s,
                peak_bytes=reference[t][2], vg_calls=reference[t][1], tokens=reference[t][0],
            ))
    meta = {"config_hash": config_hash(model.config), "config": model.config.to_dict(), "seed": spec.seed,
            "precision": model.dtype.name, "spec": spec.to_dict(), "timer": timer.name,
            "prompt": [int(x) for x in prompt]}
    return BenchReport(cells, meta)


# ---------------------------------------------------------------------------
# analytic cost model


def flop_model(config: ModelConfig, method: str, spec: BenchSpec | None = None, rank: int = 16,
               targets=("q", "v")) -> dict:
    """Per-token decode FLOPs (a multiply-add counts 2, a lone multiply 1).

    ``base`` covers projections, attention over the mean decode context and
    the LM head; ``overhead`` is what the adapter adds to every decode step.
    """
    L, d, f, V = config.n_layers, config.d_model, config.d_ffn, config.vocab_size
    spec = spec or BenchSpec()
    ctx = spec.prompt_length + (spec.max_new_tokens - 1) / 2
    per_layer = 2 * (4 * d * d + 3 * d * f) + 2 * 2 * ctx * d
    base = L * per_layer + 2 * d * V
    if method == "none":
        per = 0
    elif method == "para":
        per = 2 * d + f  # the three Hadamard products; generators run at prefill only
    elif method == "ia3":
        per = 2 * d + f
    elif method == "lora":
        dims = {"q": (d, d), "k": (d, d), "v": (d, d), "o": (d, d), "g": (d, f), "u": (d, f), "d": (f, d)}
        per = sum(2 * rank * sum(dims[t]) for t in targets)
    else:
        raise UnknownMethodError(f"unknown adapter method {method!r}")
    return {"base": base, "overhead_per_layer": per, "overhead": L * per, "total": base + L * per}


# ---------------------------------------------------------------------------
# ordering checks


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


def check_orderings(report: BenchReport, config: ModelConfig, para="para", lora="lora", ia3="ia3",
                    min_speedup: float = 1.05, ia3_tolerance: float = 0.10) -> list[Check]:
    """Efficiency orderings between PARA, un-merged LoRA and IA3 for every beam size."""
    out = []
    fp = flop_model(config, "para")["overhead"]
    fl = flop_model(config, "lora")["overhead"]
    out.append(Check("flop_model none < para < lora", 0 < fp < fl, f"none=0 para={fp} lora={fl}"))
    for beam in sorted({c.beam for c in report.cells}):
        p, l_, i = report.cell(para, beam), report.cell(lora, beam), report.cell(ia3, beam)
        ratio = p.tps_median / l_.tps_median
        out.append(Check(f"beam{beam} para tps >= {min_speedup} x lora", ratio >= min_speedup,
                         f"median para={p.tps_median:.2f} lora={l_.tps_median:.2f} ratio={ratio:.3f}"))
        gap = abs(p.tps_median - i.tps_median) / i.tps_median
        out.append(Check(f"beam{beam} |para - ia3| / ia3 <= {ia3_tolerance}", gap <= ia3_tolerance,
                         f"median para={p.tps_median:.2f} ia3={i.tps_median:.2f} gap={gap:.3f}"))
        out.append(Check(f"beam{beam} peak para <= lora", p.peak_bytes <= l_.peak_bytes,
                         f"para={p.peak_bytes} lora={l_.peak_bytes}"))
        out.append(Check(f"beam{beam} measured ordering matches flop_model",
                         (p.tps_median > l_.tps_median) == (fp < fl),
                         f"flop para<lora={fp < fl} measured para>lora={p.tps_median > l_.tps_median}"))
    return out
