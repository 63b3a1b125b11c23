"""Command-line entry point: ``paralm <command> CONFIG.yaml [options]``.

Exit codes: 0 ok, 1 usage, 2 invalid configuration or input, 3 numerical or
measured-property failure. All files are written under ``output_dir``.
"""
from __future__ import annotations

import json
import os
import sys

import click

from .backbone import Transformer, generate
from .config import ConfigError, RunConfig
from .errors import (CacheOverflowError, DivergenceError, EmptyPromptError, FormatError, KernelError,
                     ParalmError, ShapeError, UnknownMethodError, UnknownTenantError)
from .peft import load_adapter, make_adapter, param_breakdown, randomize, save_adapter
from .serving import BenchSpec, TenantRegistry, check_orderings, run_bench
from .training import (TrainConfig, gradcheck_methods, gradcheck_model, make_task, pretrain_copy,
                       token_accuracy, train)

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2, 3

_INVALID = (ConfigError, FormatError, ShapeError, UnknownMethodError, UnknownTenantError, CacheOverflowError,
            EmptyPromptError, ValueError, FileNotFoundError)
_NUMERIC = (KernelError, DivergenceError)


class _Failure(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _out(cfg: RunConfig, *parts) -> str:
    d = cfg["output_dir"]
    os.makedirs(d, exist_ok=True)
    return os.path.join(d, *parts)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _backbone_path(cfg: RunConfig) -> str:
    return cfg["model"]["path"] or os.path.join(cfg["output_dir"], "backbone.bin")


def _load_model(cfg: RunConfig) -> Transformer:
    path = _backbone_path(cfg)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no backbone at {path}; run `paralm init` first or set model.path")
    return Transformer.load(path, precision=cfg["precision"])


def _task(cfg: RunConfig, vocab: int):
    t = dict(cfg["task"])
    return make_task(t.pop("name"), vocab_size=vocab, **t)


def _train_config(cfg: RunConfig, **over) -> TrainConfig:
    t = {**cfg["train"], **over}
    return TrainConfig(seed=cfg["seed"], **t)


@click.group()
def cli():
    """Prompt-aware adapters over a frozen decoder: init, train, generate, bench."""


def main(argv=None) -> int:
    """Run the CLI and return its exit code."""
    try:
        rv = cli.main(args=argv, prog_name="paralm", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.UsageError as exc:
        exc.show()
        return EXIT_USAGE
    except click.Abort:
        return EXIT_USAGE
    return rv if isinstance(rv, int) else EXIT_OK


def _command(fn):
    """Load the config, run ``fn``, and map typed errors onto exit codes."""
    def wrapper(config_path, seed, output_dir, **kw):
        try:
            cfg = RunConfig.load(config_path)
            if seed is not None:
                cfg.data["seed"] = seed
            if output_dir is not None:
                cfg.data["output_dir"] = output_dir
            cfg.validate()
            return fn(cfg, **kw) or EXIT_OK
        except _Failure as exc:
            click.echo(f"error: {exc}", err=True)
            return exc.code
        except _NUMERIC as exc:
            click.echo(f"numerical failure: {exc}", err=True)
            return EXIT_NUMERIC
        except (_INVALID + (OSError, ParalmError)) as exc:
            click.echo(f"invalid: {exc}", err=True)
            return EXIT_INVALID

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    wrapper.__click_params__ = list(getattr(fn, "__click_params__", []))
    wrapper = click.option("--output-dir", default=None, help="Override the config output directory.")(wrapper)
    wrapper = click.option("--seed", type=int, default=None, help="Override the config seed.")(wrapper)
    return click.argument("config_path", type=click.Path(dir_okay=False))(wrapper)


@cli.command("init")
@_command
def cmd_init(cfg: RunConfig):
    """Create a backbone (optionally copy-pretrained) and save it to output_dir/backbone.bin."""
    mc = cfg.model_config()
    pre = cfg["model"]["pretrain"]
    path = _out(cfg, "backbone.bin")
    if pre:
        pre = dict(pre) if isinstance(pre, dict) else {}
        hist = []
        model, result, acc = pretrain_copy(mc, seed=cfg["seed"], precision=cfg["precision"], log=hist.append, **pre)
        with open(_out(cfg, "pretrain_history.jsonl"), "w") as fh:
            fh.write(result.history_jsonl())
        _write_json(_out(cfg, "pretrain_metrics.json"), {"copy_accuracy": acc, "steps": result.steps,
                                                         "best_dev_loss": result.best_dev_loss})
        click.echo(f"pretrained on copy: accuracy {acc:.4f} after {result.steps} steps")
    else:
        model = Transformer(mc, precision=cfg["precision"], seed=cfg["seed"])
    model.save(path)
    click.echo(path)


@cli.command("train")
@_command
def cmd_train(cfg: RunConfig):
    """Train an adapter on the configured task; writes adapter.bin, history.jsonl, metrics.json."""
    model = _load_model(cfg)
    task = _task(cfg, model.config.vocab_size)
    method = cfg["adapter"]["method"]
    adapter = make_adapter(method, model.config, seed=cfg["seed"], precision=model.dtype,
                           metadata={"task": task.recipe}, **cfg.adapter_hyper())
    result = train(model, adapter, task, _train_config(cfg))
    save_adapter(_out(cfg, "adapter.bin"), result.adapter)
    with open(_out(cfg, "history.jsonl"), "w") as fh:
        fh.write(result.history_jsonl())
    metrics = {
        "method": method, "n_params": result.adapter.n_params, "steps": result.steps,
        "best_step": result.best_step, "best_dev_loss": result.best_dev_loss,
        "stopped_early": result.stopped_early,
        "test_accuracy": token_accuracy(model, result.adapter, task.test),
        "frozen_test_accuracy": token_accuracy(model, None, task.test),
    }
    _write_json(_out(cfg, "metrics.json"), metrics)
    click.echo(json.dumps(metrics, sort_keys=True))


def _parse_ids(values, prompt_file):
    ids = []
    for v in values:
        ids.extend(x for x in v.replace(",", " ").split())
    if prompt_file:
        with open(prompt_file) as fh:
            ids.extend(fh.read().replace(",", " ").split())
    try:
        return [int(x) for x in ids]
    except ValueError:
        raise _Failure(EXIT_USAGE, f"prompt ids must be integers, got {ids}") from None


@cli.command("generate")
@_command
@click.option("--prompt", "prompt", multiple=True, help="Prompt token ids, e.g. '3 1 4' or '3,1,4'.")
@click.option("--prompt-file", type=click.Path(dir_okay=False), default=None)
@click.option("--beam", type=int, default=1, show_default=True)
@click.option("--max-new", type=int, default=16, show_default=True)
@click.option("--adapter", "adapter_path", default=None, help="Adapter file (default: adapter.path).")
def cmd_generate(cfg: RunConfig, prompt, prompt_file, beam, max_new, adapter_path):
    """Print the generated token ids for one prompt."""
    ids = _parse_ids(prompt, prompt_file)
    if beam < 1 or max_new < 0:
        raise _Failure(EXIT_USAGE, "--beam must be >= 1 and --max-new >= 0")
    model = _load_model(cfg)
    path = adapter_path or cfg["adapter"]["path"]
    adapter = load_adapter(path, config=model.config).astype(model.dtype) if path else None
    out = generate(model, ids, max_new, beam, adapter=adapter)
    click.echo(" ".join(str(t) for t in out))


@cli.command("bench")
@_command
def cmd_bench(cfg: RunConfig):
    """Latency/memory benchmark across methods; writes bench.json and bench.csv."""
    b = dict(cfg["bench"])
    adapters = b.pop("adapters") or {}
    path = cfg["model"]["path"]
    if path:
        model = Transformer.load(path, precision=cfg["precision"])
    else:
        model = Transformer(cfg.model_config(), precision=cfg["precision"], seed=cfg["seed"])
    spec = BenchSpec(seed=cfg["seed"], **b)
    registry = TenantRegistry(model)
    for i, m in enumerate(spec.methods):
        if m in adapters:
            registry.register_tenant(m, adapters[m])
        else:
            fresh = make_adapter(m, model.config, seed=cfg["seed"] + i, precision=model.dtype)
            registry.register_tenant(m, randomize(fresh, seed=cfg["seed"] + 100 + i, std=0.02))
    report = run_bench(spec, registry)
    report.write(cfg["output_dir"])
    code = EXIT_OK
    if {"para", "lora", "ia3"} <= set(spec.methods):
        checks = check_orderings(report, model.config)
        _write_json(_out(cfg, "bench_checks.json"), [c.__dict__ for c in checks])
        for c in checks:
            click.echo(f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.detail}")
        if not all(c.passed for c in checks):
            code = EXIT_NUMERIC
    click.echo(report.to_csv(), nl=False)
    return code


@cli.command("count-params")
@_command
def cmd_count_params(cfg: RunConfig):
    """Tunable-parameter table for every method at the configured model dimensions."""
    mc = cfg.model_config()
    a = cfg["adapter"]
    click.echo(f"{'method':<8}{'headline':>14}{'bias':>12}{'total':>14}")
    rows = {}
    for m in ("none", "para", "lora", "ia3"):
        br = param_breakdown(mc, m, r=a["r"], rank=a["rank"], targets=tuple(a["targets"]))
        rows[m] = br
        click.echo(f"{m:<8}{br['headline']:>14,}{br['bias']:>12,}{br['total']:>14,}")
    _write_json(_out(cfg, "param_counts.json"), {"config": mc.to_dict(), "counts": rows})


@cli.command("gradcheck")
@_command
def cmd_gradcheck(cfg: RunConfig):
    """Finite-difference check of adapter gradients; exit 3 on failure."""
    g = dict(cfg["gradcheck"])
    model = gradcheck_model(g["n_layers"], g["d_model"], g["n_heads"], g["d_ffn"], g["vocab_size"], seed=cfg["seed"])
    reports = gradcheck_methods(model, seed=cfg["seed"], eps=g["eps"], tolerance=g["tolerance"], batch=g["batch"],
                                prompt_len=g["prompt_len"], target_len=g["target_len"])
    _write_json(_out(cfg, "gradcheck.json"), {m: r.to_dict() for m, r in reports.items()})
    for m, r in reports.items():
        click.echo(f"{'PASS' if r.passed else 'FAIL'}  {m}: max block relative error {r.max_error:.3e}")
    return EXIT_OK if all(r.passed for r in reports.values()) else EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
