import json

import pytest

from hqclip.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, run

TRAIN_SMALL = ["--steps", "20", "--batch-size", "16", "--d", "8", "--d-tok", "8", "--hidden", "8", "--log-every", "5"]


@pytest.fixture(scope="module")
def world_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert run(["synth", "--out", str(out), "--n", "150", "--eval-sizes", "20,20,20", "--seed", "1",
                "--records-per-shard", "60"]) == EXIT_OK
    return out


def test_synth_layout(world_dir):
    for name in ("world.json", "tokenizer.txt", "train/manifest.json", "eval/tasks.json", "resolved_config.json"):
        assert (world_dir / name).exists()
    assert json.loads((world_dir / "train" / "manifest.json").read_text())["shard_counts"] == [60, 60, 30]
    assert json.loads((world_dir / "resolved_config.json").read_text())["seed"] == 1


def test_help_lists_defaults(capsys):
    assert run(["train", "--help"]) == EXIT_OK
    out = capsys.readouterr().out
    for flag, default in (("--mix-ratio", "0.75"), ("--alpha", "0.5"), ("--beta", "10.0"), ("--n-neg", "1")):
        assert flag in out and f"(default: {default})" in out


@pytest.mark.parametrize("cmd", [c for c in ("synth", "refine", "stats", "inspect", "build-vocab", "train", "eval",
                                             "score", "ablate")])
def test_every_subcommand_has_help(cmd, capsys):
    assert run([cmd, "--help"]) == EXIT_OK
    assert "--seed" in capsys.readouterr().out


def test_usage_errors(capsys):
    assert run(["frobnicate"]) == EXIT_USAGE
    assert "usage" in capsys.readouterr().err
    assert run(["stats", "--input", "x", "--bogus"]) == EXIT_USAGE
    assert "--bogus" in capsys.readouterr().err
    assert run(["stats"]) == EXIT_USAGE
    assert run([]) == EXIT_USAGE


def test_runtime_error_exit_code(tmp_path, capsys):
    assert run(["eval", "--checkpoint", str(tmp_path / "none.npz"), "--suite", str(tmp_path),
                "--tokenizer", str(tmp_path / "t")]) == EXIT_RUNTIME
    assert "error" in capsys.readouterr().err


def test_config_layering(world_dir, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 5, "stats": {"top_n": 3, "input": str(world_dir / "train")}}))
    assert run(["stats", "--config", str(cfg), "--out", str(tmp_path / "s.json"), "--top-n", "4"]) == EXIT_OK
    resolved = json.loads((tmp_path / "s.json.resolved.json").read_text())
    assert resolved["seed"] == 5 and resolved["top_n"] == 4
    assert "seed=5" in capsys.readouterr().err
    assert len(json.loads((tmp_path / "s.json").read_text())["tag_frequency_topN"]) == 4
    cfg.write_text(json.dumps({"stats": {"nope": 1}}))
    assert run(["stats", "--config", str(cfg), "--input", "x"]) == EXIT_USAGE


def test_refine_workers_identical(world_dir, tmp_path):
    outs = []
    for w in ("1", "8"):
        assert run(["refine", "--input", str(world_dir / "train"), "--out", str(tmp_path / w), "--workers", w,
                    "--records-per-shard", "64"]) == EXIT_OK
        outs.append([p.read_bytes() for p in sorted((tmp_path / w).glob("refined-*.jsonl"))])
    assert outs[0] == outs[1] and len(outs[0]) == 3


def test_refine_sft_export(world_dir, tmp_path):
    assert run(["refine", "--input", str(world_dir / "train"), "--out", str(tmp_path / "r"),
                "--sft-out", str(tmp_path / "sft.jsonl")]) == EXIT_OK
    assert len((tmp_path / "sft.jsonl").read_text().splitlines()) == 150


def test_inspect_and_vocab(world_dir, tmp_path, capsys):
    assert run(["inspect", "--input", str(world_dir / "train"), "--limit", "2"]) == EXIT_OK
    assert capsys.readouterr().out.count("valid=True") == 2
    assert run(["inspect", "--input", str(world_dir / "train"), "--id", "missing"]) == EXIT_RUNTIME
    assert run(["build-vocab", "--input", str(world_dir / "train"), "--K", "10", "--out", str(tmp_path / "v.json")]) == 0
    assert json.loads((tmp_path / "v.json").read_text())["K"] == 10


def _train(world_dir, out, *extra):
    return run(["train", "--data", str(world_dir / "train"), "--tokenizer", str(world_dir / "tokenizer.txt"),
                "--eval-suite", str(world_dir / "eval"), "--out", str(out), "--seed", "0", *TRAIN_SMALL, *extra])


def test_train_deterministic_then_eval_and_score(world_dir, tmp_path):
    assert _train(world_dir, tmp_path / "a") == EXIT_OK
    assert _train(world_dir, tmp_path / "b") == EXIT_OK
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    for name in ("checkpoint.npz", "vocab.json", "eval_report.json", "resolved_config.json"):
        assert (tmp_path / "a" / name).exists()
    ck, tok = str(tmp_path / "a" / "checkpoint.npz"), str(world_dir / "tokenizer.txt")
    assert run(["eval", "--checkpoint", ck, "--suite", str(world_dir / "eval"), "--tokenizer", tok,
                "--out", str(tmp_path / "rep.json")]) == EXIT_OK
    assert 0 <= json.loads((tmp_path / "rep.json").read_text())["aggregate"] <= 1
    assert run(["score", "--checkpoint", ck, "--input", str(world_dir / "train"), "--tokenizer", tok,
                "--out", str(tmp_path / "score.json")]) == EXIT_OK
    assert set(json.loads((tmp_path / "score.json").read_text())) == {"raw", "detailed"}


def test_ablate_table_shape(tmp_path, capsys):
    assert run(["ablate", "--param", "mix_ratio", "--values", "0,0.25,0.5,0.75,1", "--seeds", "0",
                "--n-train", "100", "--out", str(tmp_path), *TRAIN_SMALL]) == EXIT_OK
    lines = (tmp_path / "table.md").read_text().strip().splitlines()
    assert len(lines) == 2 + 5
    header = [c.strip() for c in lines[0].strip("|").split("|")]
    assert header[0] == "mix_ratio" and "zs/concepts" in header and "dis/attribute_swap" in header
    assert len(json.loads((tmp_path / "table.json").read_text())["rows"]) == 5


def test_ablate_bad_values():
    assert run(["ablate", "--param", "alpha", "--values", "x,y"]) == EXIT_USAGE
