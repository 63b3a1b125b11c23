import json
import os

import pytest

from paralm.cli import main


def write(tmp_path, text):
    p = tmp_path / "run.yaml"
    p.write_text(text)
    return str(p)


@pytest.fixture
def cfg(tmp_path):
    return write(tmp_path, f"""
seed: 0
output_dir: {tmp_path / 'out'}
model:
  config: {{preset: desk, n_layers: 1}}
task: {{name: shift_k, n_train: 40, n_dev: 8, n_test: 8, prompt_len: 4}}
train: {{max_steps: 4, batch_size: 8}}
""")


def test_count_params_7b(tmp_path, capsys):
    p = write(tmp_path, f"output_dir: {tmp_path / 'o'}\nmodel: {{config: llama2_7b}}\n")
    assert main(["count-params", p]) == 0
    out = capsys.readouterr().out
    assert "8,945,664" in out
    assert json.loads((tmp_path / "o" / "param_counts.json").read_text())["counts"]["para"]["headline"] == 8945664


def test_init_train_generate(cfg, tmp_path, capsys):
    assert main(["init", cfg]) == 0
    assert main(["train", cfg]) == 0
    metrics = json.loads((tmp_path / "out" / "metrics.json").read_text())
    assert metrics["method"] == "para" and metrics["steps"] == 4
    capsys.readouterr()
    adapter = str(tmp_path / "out" / "adapter.bin")
    assert main(["generate", cfg, "--prompt", "1 2 3", "--max-new", "3", "--adapter", adapter]) == 0
    assert len(capsys.readouterr().out.split()) == 3
    assert main(["generate", cfg, "--prompt", "1,2", "--max-new", "0"]) == 0
    assert capsys.readouterr().out.strip() == ""
    assert main(["generate", cfg, "--prompt", "1", "--beam", "3", "--max-new", "2"]) == 0
    assert sorted(os.listdir(tmp_path)) == ["out", "run.yaml"]


def test_gradcheck_command(cfg, tmp_path, capsys):
    assert main(["gradcheck", cfg]) == 0
    assert "PASS  para" in capsys.readouterr().out
    assert json.loads((tmp_path / "out" / "gradcheck.json").read_text())["lora"]["passed"]


def test_bench_command_writes_reports(tmp_path):
    p = write(tmp_path, f"""
output_dir: {tmp_path / 'b'}
model: {{config: {{preset: desk, n_layers: 1}}}}
bench: {{prompt_length: 8, max_new_tokens: 2, repetitions: 1, warmup_runs: 0, beam_sizes: [1]}}
""")
    code = main(["bench", p])
    assert code in (0, 3)
    assert (tmp_path / "b" / "bench.json").exists() and (tmp_path / "b" / "bench.csv").exists()
    checks = json.loads((tmp_path / "b" / "bench_checks.json").read_text())
    assert code == (0 if all(c["passed"] for c in checks) else 3)


def test_exit_codes(tmp_path, capsys):
    bad = write(tmp_path, "train:\n  lr: 0.1\n  lrr: 2\n")
    assert main(["train", bad]) == 2
    assert "line 3" in capsys.readouterr().err
    assert main(["count-params", write(tmp_path, "precision: float16\n")]) == 2
    assert main(["count-params", write(tmp_path, "model: [1, 2\n")]) == 2
    assert main(["no-such-command"]) == 1
    assert main(["count-params"]) == 1
    missing = write(tmp_path, f"output_dir: {tmp_path / 'x'}\nmodel: {{path: {tmp_path / 'nope.bin'}}}\n")
    assert main(["generate", missing, "--prompt", "1"]) == 2
    assert main(["generate", missing, "--prompt", "a b"]) == 1
