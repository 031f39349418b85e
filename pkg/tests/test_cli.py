import json
from pathlib import Path

import numpy as np
import pytest

from sra.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, load_run_config, main
from sra.training import read_metrics


@pytest.fixture(scope="module")
def run_config(tiny_corpus_file, tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = {
        "corpus": str(tiny_corpus_file),
        "out": str(base / "run"),
        "tokenizer": None,
        "model": {"dim": 16, "n_layers": 2, "n_heads": 2, "n_experts": 4,
                  "top_k": 2, "d_ff": 24, "vocab_size": 300, "max_seq_len": 64,
                  "dropout": 0.0},
        "train": {"lr_peak": 3e-3, "warmup_steps": 10, "epochs": 2,
                  "switch_epoch": 2, "batch_size": 4, "seq_len": 24,
                  "eval_interval": 0, "log_interval": 0, "seed": 0},
    }
    path = base / "config.json"
    path.write_text(json.dumps(cfg, indent=2))
    return {"path": path, "cfg": cfg, "base": base}


@pytest.fixture(scope="module")
def trained(run_config):
    rc = main(["train", "--config", str(run_config["path"])])
    assert rc == EXIT_OK
    out = Path(run_config["cfg"]["out"])
    ckpt = out / "checkpoints" / "epoch_002"
    return {"out": out, "ckpt": ckpt, "config": run_config}


class TestTokenize:
    def test_trains_and_writes(self, tiny_corpus_file, tmp_path, capsys):
        rc = main(["tokenize", "--corpus", str(tiny_corpus_file),
                   "--vocab-size", "300", "--out", str(tmp_path / "tok")])
        assert rc == EXIT_OK
        assert (tmp_path / "tok" / "vocab.txt").exists()
        assert (tmp_path / "tok" / "merges.txt").exists()
        assert (tmp_path / "tok" / "run_manifest.json").exists()
        assert "300 tokens" in capsys.readouterr().out

    def test_rerun_is_byte_identical(self, tiny_corpus_file, tmp_path):
        for name in ("a", "b"):
            assert main(["tokenize", "--corpus", str(tiny_corpus_file),
                         "--vocab-size", "280", "--out", str(tmp_path / name)]) == EXIT_OK
        for fname in ("vocab.txt", "merges.txt"):
            assert ((tmp_path / "a" / fname).read_bytes()
                    == (tmp_path / "b" / fname).read_bytes())

    def test_vocab_must_exceed_alphabet(self, tiny_corpus_file, tmp_path):
        rc = main(["tokenize", "--corpus", str(tiny_corpus_file),
                   "--vocab-size", "256", "--out", str(tmp_path / "tok")])
        assert rc == EXIT_USAGE

    def test_missing_corpus_is_runtime_error(self, tmp_path):
        rc = main(["tokenize", "--corpus", str(tmp_path / "nope.txt"),
                   "--vocab-size", "300", "--out", str(tmp_path / "tok")])
        assert rc == EXIT_RUNTIME


class TestRunConfig:
    def test_loads_sections(self, run_config):
        cfg = load_run_config(run_config["path"])
        assert cfg.model.dim == 16
        assert cfg.train.epochs == 2
        assert cfg.corpus == run_config["cfg"]["corpus"]

    def test_dotted_overrides(self, run_config):
        cfg = load_run_config(run_config["path"],
                              overrides=["model.dim=32", "train.alpha=0.5"])
        assert cfg.model.dim == 32
        assert cfg.train.alpha == 0.5

    def test_bare_override_resolves_unique_field(self, run_config):
        cfg = load_run_config(run_config["path"],
                              overrides=["switch_epoch=1", "beta=0"])
        assert cfg.train.switch_epoch == 1
        assert cfg.train.beta == 0.0

    def test_top_level_override(self, run_config, tmp_path):
        cfg = load_run_config(run_config["path"],
                              overrides=[f"out={tmp_path / 'elsewhere'}"])
        assert cfg.out == str(tmp_path / "elsewhere")

    def test_variant_flag(self, run_config):
        cfg = load_run_config(run_config["path"], variant="dense")
        assert cfg.model.variant == "dense"

    def test_json_values_parse(self, run_config):
        cfg = load_run_config(run_config["path"],
                              overrides=["train.betas=[0.8, 0.9]",
                                         "train.grad_clip=null",
                                         "train.top_k_only=2"])
        assert cfg.train.betas == (0.8, 0.9)
        assert cfg.train.grad_clip is None
        assert cfg.train.top_k_only == 2


class TestTrainCommand:
    def test_outputs(self, trained):
        out = trained["out"]
        assert (out / "metrics.jsonl").exists()
        assert (out / "tokenizer" / "vocab.txt").exists()
        assert (out / "run_manifest.json").exists()
        assert (trained["ckpt"] / "model.pt").exists()
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["command"] == "train"
        assert manifest["config_hash"]

    def test_progressive_schedule_in_metrics(self, trained):
        rows = read_metrics(trained["out"] / "metrics.jsonl")
        ks = {row["epoch"]: row["k_active"] for row in rows}
        assert ks == {1: 1, 2: 2}

    def test_unknown_config_key_rejected_before_compute(self, run_config, tmp_path):
        bad = tmp_path / "bad.json"
        payload = dict(run_config["cfg"])
        payload["exp_name"] = "x"
        payload["out"] = str(tmp_path / "never")
        bad.write_text(json.dumps(payload))
        assert main(["train", "--config", str(bad)]) == EXIT_USAGE
        assert not (tmp_path / "never").exists()

    def test_unknown_override_rejected_before_compute(self, run_config, tmp_path):
        rc = main(["train", "--config", str(run_config["path"]),
                   "--override", "model.heads=4", "--out", str(tmp_path / "never")])
        assert rc == EXIT_USAGE
        assert not (tmp_path / "never").exists()

    def test_invalid_value_rejected(self, run_config, tmp_path):
        rc = main(["train", "--config", str(run_config["path"]),
                   "--override", "train.lr_peak=-1", "--out", str(tmp_path / "never")])
        assert rc == EXIT_USAGE

    def test_missing_config_file(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "none.json")]) == EXIT_RUNTIME

    def test_malformed_json(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["train", "--config", str(bad)]) == EXIT_USAGE


class TestEvalCommand:
    def test_writes_perplexity_and_records(self, trained, capsys):
        rc = main(["eval", "--checkpoint", str(trained["ckpt"]), "--split", "val"])
        assert rc == EXIT_OK
        out = trained["ckpt"] / "eval_val"
        payload = json.loads((out / "perplexity.json").read_text())
        assert payload["split"] == "val"
        rows = read_metrics(trained["out"] / "metrics.jsonl")
        final_val = [r for r in rows if "val_perplexity" in r][-1]["val_perplexity"]
        assert payload["perplexity"] == pytest.approx(final_val, rel=1e-9)
        records = json.loads((out / "records.json").read_text())
        assert records["meta"]["n_experts"] == 4
        assert "perplexity:" in capsys.readouterr().out

    def test_rerun_identical_modulo_manifest(self, trained, tmp_path):
        a, b = tmp_path / "e1", tmp_path / "e2"
        for out in (a, b):
            assert main(["eval", "--checkpoint", str(trained["ckpt"]),
                         "--out", str(out)]) == EXIT_OK
        assert (a / "records.json").read_bytes() == (b / "records.json").read_bytes()
        assert (a / "perplexity.json").read_bytes() == (b / "perplexity.json").read_bytes()

    def test_train_split(self, trained, tmp_path):
        rc = main(["eval", "--checkpoint", str(trained["ckpt"]), "--split", "train",
                   "--out", str(tmp_path / "et")])
        assert rc == EXIT_OK
        payload = json.loads((tmp_path / "et" / "perplexity.json").read_text())
        assert payload["n_tokens"] > 0

    def test_missing_checkpoint(self, tmp_path):
        rc = main(["eval", "--checkpoint", str(tmp_path / "none")])
        assert rc == EXIT_RUNTIME


@pytest.fixture(scope="module")
def eval_records(trained, tmp_path_factory):
    out = tmp_path_factory.mktemp("records")
    assert main(["eval", "--checkpoint", str(trained["ckpt"]),
                 "--out", str(out)]) == EXIT_OK
    return out / "records.json"


class TestAnalyzeCommand:
    def test_utilization(self, eval_records, tmp_path, capsys):
        rc = main(["analyze", "--records", str(eval_records),
                   "--report", "utilization", "--out", str(tmp_path)])
        assert rc == EXIT_OK
        payload = json.loads((tmp_path / "utilization.json").read_text())
        counts = np.array(payload["layers"][0]["counts"])
        assert counts.sum() == payload["k"] * payload["n_tokens"]
        assert "Layer" in capsys.readouterr().out

    def test_specialization_uses_recorded_tokenizer(self, eval_records, tmp_path):
        rc = main(["analyze", "--records", str(eval_records),
                   "--report", "specialization", "--out", str(tmp_path),
                   "--top-m", "3"])
        assert rc == EXIT_OK
        payload = json.loads((tmp_path / "specialization.json").read_text())
        assert "0" in payload and len(payload) == 2  # one table per layer
        for row in payload["0"]:
            assert len(row["top_tokens"]) <= 3

    def test_dispersion_uses_recorded_checkpoint(self, eval_records, tmp_path):
        rc = main(["analyze", "--records", str(eval_records),
                   "--report", "dispersion", "--out", str(tmp_path)])
        assert rc == EXIT_OK
        payload = json.loads((tmp_path / "dispersion.json").read_text())
        assert len(payload) == 2
        assert payload[0]["n_pairs"] == 4 * 3 // 2

    def test_missing_records(self, tmp_path):
        rc = main(["analyze", "--records", str(tmp_path / "none.json"),
                   "--report", "utilization", "--out", str(tmp_path)])
        assert rc == EXIT_RUNTIME

    def test_bad_report_name(self, eval_records, tmp_path):
        rc = main(["analyze", "--records", str(eval_records),
                   "--report", "sparsity", "--out", str(tmp_path)])
        assert rc == EXIT_USAGE


class TestTraceCommand:
    TEXT = "The film was released in December 1995 and received positive reviews."

    def test_prints_one_row_per_token(self, trained, capsys):
        rc = main(["trace", "--checkpoint", str(trained["ckpt"]),
                   "--text", self.TEXT, "--layer", "1"])
        assert rc == EXIT_OK
        out_lines = capsys.readouterr().out.strip().splitlines()
        from sra.data import Tokenizer
        tok = Tokenizer.load(trained["out"] / "tokenizer")
        n_tokens = len(tok.encode(self.TEXT))
        assert len(out_lines) == 2 + n_tokens  # title + header + rows
        assert "Expert 1 (weight)" in out_lines[1]

    def test_writes_reports_when_asked(self, trained, tmp_path):
        rc = main(["trace", "--checkpoint", str(trained["ckpt"]),
                   "--text", "The film", "--out", str(tmp_path / "tr")])
        assert rc == EXIT_OK
        payload = json.loads((tmp_path / "tr" / "trace.json").read_text())
        assert payload["layer"] == 0
        assert (tmp_path / "tr" / "trace.txt").exists()

    def test_layer_out_of_range(self, trained):
        rc = main(["trace", "--checkpoint", str(trained["ckpt"]),
                   "--text", "The film", "--layer", "9"])
        assert rc == EXIT_RUNTIME


class TestGradcheckCommand:
    def test_single_component_passes(self, capsys):
        rc = main(["gradcheck", "--component", "balance_loss"])
        assert rc == EXIT_OK
        out = capsys.readouterr().out
        assert "balance_loss" in out and "PASS" in out

    def test_unknown_component_rejected(self):
        assert main(["gradcheck", "--component", "router"]) == EXIT_USAGE


class TestParser:
    def test_no_arguments_is_usage_error(self):
        assert main([]) == EXIT_USAGE

    def test_unknown_command_is_usage_error(self):
        assert main(["optimize"]) == EXIT_USAGE

    @pytest.mark.parametrize("cmd", ["tokenize", "train", "eval", "analyze",
                                     "trace", "gradcheck"])
    def test_help_exits_zero(self, cmd, capsys):
        with pytest.raises(SystemExit) as exc:
            main([cmd, "--help"])
        assert exc.value.code == 0
        assert "usage" in capsys.readouterr().out
