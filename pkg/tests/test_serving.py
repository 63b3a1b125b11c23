import threading

import numpy as np
import pytest

from paralm.backbone import ModelConfig, Transformer, generate
from paralm.errors import CacheOverflowError, ConfigMismatchError, DuplicateTenantError, UnknownTenantError
from paralm.peft import make_adapter, randomize, save_adapter
from paralm.serving import (BenchSpec, StubTimer, TenantRegistry, check_orderings, flop_model, run_bench)


@pytest.fixture
def registry(model):
    return TenantRegistry(model)


def test_register_resolve(registry, model, desk, tmp_path):
    a = randomize(make_adapter("para", desk, seed=1), seed=2)
    p = tmp_path / "t.bin"
    save_adapter(p, a)
    registry.register_tenant("acme", str(p))
    s = registry.resolve("acme")()
    logits = s.prefill([1, 2, 3])
    base = model.forward(np.array([[1, 2, 3]]))[0, -1]
    assert not np.allclose(logits, base)
    assert registry.resolve("acme")() is not s
    with pytest.raises(DuplicateTenantError):
        registry.register_tenant("acme", a)
    with pytest.raises(UnknownTenantError):
        registry.resolve("nobody")
    with pytest.raises(ConfigMismatchError):
        registry.register_tenant("bad", make_adapter("ia3", ModelConfig(d_model=32, n_heads=4)))
    assert registry.tenants == ["acme"] and len(registry) == 1


def test_sixteen_tenants_distinct_outputs(registry, desk):
    for i in range(16):
        a = make_adapter("para", desk, seed=i)
        blk = a.layers[-1]
        # each tenant's vectors boost a different slice of the FFN, so outputs separate
        blk["b_up"][2 * desk.d_model:] = 0.0
        blk["b_up"][2 * desk.d_model + i * 10: 2 * desk.d_model + i * 10 + 10] = 40.0
        registry.register_tenant(f"t{i}", a)
    outs = {tuple(registry.generate(f"t{i}", [1, 2, 3, 4], 4)) for i in range(16)}
    assert len(outs) == 16


def test_cross_tenant_isolation(registry, desk):
    for i in range(2):
        registry.register_tenant(f"t{i}", randomize(make_adapter(["para", "lora"][i], desk, seed=i), seed=5))
    prompts = [[1, 2, 3], [9, 8, 7, 6]]
    alone = {(t, tuple(p)): registry.generate(t, p, 5) for t in ("t0", "t1") for p in prompts}
    s0 = registry.resolve("t0")()
    s1 = registry.resolve("t1")()
    a = [int(np.argmax(s0.prefill(prompts[0])))]
    b = [int(np.argmax(s1.prefill(prompts[1])))]
    for _ in range(4):
        a.append(int(np.argmax(s0.decode_step([a[-1]])[0])))
        b.append(int(np.argmax(s1.decode_step([b[-1]])[0])))
    assert a == alone[("t0", tuple(prompts[0]))]
    assert b == alone[("t1", tuple(prompts[1]))]


def test_concurrent_resolution(registry, desk):
    registry.register_tenant("x", make_adapter("ia3", desk))
    results, errors = [], []

    def work():
        try:
            results.append(registry.generate("x", [1, 2, 3], 3))
        except Exception as exc:  # pragma: no cover
            errors.append(exc)

    threads = [threading.Thread(target=work) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors and len({tuple(r) for r in results}) == 1


def test_bench_spec_validation(desk):
    with pytest.raises(ValueError):
        BenchSpec(repetitions=0)
    with pytest.raises(ValueError):
        BenchSpec(beam_sizes=(0,))
    with pytest.raises(CacheOverflowError):
        BenchSpec(prompt_length=500, max_new_tokens=32, beam_sizes=(1,)).validate(desk)
    BenchSpec().validate(desk)


def test_run_bench_accounting_with_stub_timer(registry, desk, model):
    for i, m in enumerate(("para", "lora", "ia3")):
        registry.register_tenant(m, randomize(make_adapter(m, desk, seed=i), seed=9, std=0.05))
    spec = BenchSpec(prompt_length=12, max_new_tokens=3, repetitions=1, warmup_runs=0)
    rep = run_bench(spec, registry, timer=StubTimer(0.5))
    assert len(rep.cells) == 6
    for c in rep.cells:
        assert len(c.samples) == 1 and c.samples[0] == 6.0  # 3 tokens between two 0.5 s ticks
        assert c.tps_median > 0 and c.peak_bytes > 0
        assert c.vg_calls == (desk.n_layers if c.method == "para" else 0)
        prompt = rep.metadata["prompt"]
        assert c.tokens == generate(model, prompt, 3, c.beam, adapter=registry.adapter(c.tenant))
    assert rep.to_json(timing=False) == run_bench(spec, registry, timer=StubTimer(0.5)).to_json(timing=False)
    csv = rep.to_csv().splitlines()
    assert csv[0].startswith("tenant,method,beam") and len(csv) == 7
    assert len(check_orderings(rep, desk)) == 1 + 4 * 2
    with pytest.raises(UnknownTenantError):
        run_bench(BenchSpec(methods=("zzz",), repetitions=1), registry)


def test_flop_model_values():
    c = ModelConfig.llama2_7b()
    assert flop_model(c, "para")["overhead_per_layer"] == 19_200
    assert flop_model(c, "lora", rank=16)["overhead_per_layer"] == 2 * (2 * 16 * (4096 + 4096))
    assert flop_model(c, "none")["overhead"] == 0
    d = ModelConfig.bench()
    ov = {m: flop_model(d, m)["overhead"] for m in ("none", "para", "lora")}
    assert ov["none"] < ov["para"] < ov["lora"]
    assert flop_model(d, "para")["base"] == flop_model(d, "lora")["base"]
