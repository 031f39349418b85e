import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from corpus_gen import generate_corpus  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_corpus_file(tmp_path_factory) -> Path:
    """~18K characters; enough for a sub-minute training run."""
    path = tmp_path_factory.mktemp("corpus") / "tiny.txt"
    path.write_text(generate_corpus(18_000, seed=11), encoding="utf-8")
    return path


@pytest.fixture(scope="session")
def gradcheck_reports():
    """One finite-difference pass per component, shared by unit and acceptance tests."""
    from sra.gradcheck import COMPONENTS, grad_check

    return {name: grad_check(name) for name in COMPONENTS}


@pytest.fixture(scope="session")
def toy_run(tiny_corpus_file, tmp_path_factory):
    """A small two-epoch progressive training run shared across test modules."""
    from sra.model import ModelConfig
    from sra.training import TrainConfig, train

    out = tmp_path_factory.mktemp("toy_run")
    model_cfg = ModelConfig(dim=32, n_layers=2, n_heads=2, n_experts=4, top_k=2,
                            d_ff=48, vocab_size=320, max_seq_len=64, dropout=0.0)
    train_cfg = TrainConfig(lr_peak=3e-3, warmup_steps=20, epochs=2, switch_epoch=2,
                            batch_size=4, seq_len=32, eval_interval=0, log_interval=0,
                            seed=0)
    result = train(model_cfg, train_cfg, tiny_corpus_file, out)
    return {"result": result, "model_cfg": model_cfg, "train_cfg": train_cfg,
            "corpus": tiny_corpus_file}


@pytest.fixture(scope="session")
def acceptance_run(tmp_path_factory):
    """The two-epoch progressive smoke run: 64-dim, 2 layers, 8 experts,
    2000-token vocab over a >= 1M-character synthetic corpus."""
    import time

    from sra.model import ModelConfig
    from sra.training import TrainConfig, train

    base = tmp_path_factory.mktemp("acceptance")
    corpus = base / "corpus.txt"
    corpus.write_text(generate_corpus(1_050_000, seed=7), encoding="utf-8")
    model_cfg = ModelConfig(dim=64, n_layers=2, n_heads=4, n_experts=8, top_k=2,
                            d_ff=128, vocab_size=2000, max_seq_len=128, dropout=0.0)
    train_cfg = TrainConfig(lr_peak=3e-3, warmup_steps=50, epochs=2, switch_epoch=2,
                            batch_size=8, seq_len=64, eval_interval=0,
                            log_interval=0, seed=0)
    started = time.monotonic()
    result = train(model_cfg, train_cfg, corpus, base / "run")
    elapsed = time.monotonic() - started
    return {"result": result, "model_cfg": model_cfg, "train_cfg": train_cfg,
            "corpus": corpus, "elapsed_seconds": elapsed}


@pytest.fixture(scope="session")
def ablation_runs(tmp_path_factory):
    """Schedule and dispersion-coefficient ablations on one small corpus.

    32 experts over a deliberately easy corpus for four epochs: enough slack
    capacity that routing collapse can actually show up. 3 seeds x
    {progressive switch at epoch 3, top-2 from epoch 1} plus a beta=0 twin of
    the progressive seed-0 run for the anchor-dispersion comparison.
    """
    from dataclasses import replace

    from sra.data import train_bpe
    from sra.model import ModelConfig
    from sra.training import TrainConfig, train

    base = tmp_path_factory.mktemp("ablations")
    corpus = base / "corpus.txt"
    corpus.write_text(generate_corpus(400_000, seed=13), encoding="utf-8")
    model_cfg = ModelConfig(dim=32, n_layers=2, n_heads=2, n_experts=32, top_k=2,
                            d_ff=32, vocab_size=800, max_seq_len=64, dropout=0.0)
    tok_dir = base / "tokenizer"
    train_bpe(corpus.read_bytes(), model_cfg.vocab_size).save(tok_dir)
    base_cfg = TrainConfig(lr_peak=6e-3, warmup_steps=30, epochs=4, switch_epoch=3,
                           batch_size=4, seq_len=48, eval_interval=0,
                           log_interval=0, seed=0)

    def run(name: str, cfg: TrainConfig):
        return train(model_cfg, cfg, corpus, base / name, tokenizer_dir=tok_dir)

    progressive, immediate = {}, {}
    for seed in (0, 1, 2):
        progressive[seed] = run(f"progressive_s{seed}", replace(base_cfg, seed=seed))
        immediate[seed] = run(f"immediate_s{seed}",
                              replace(base_cfg, seed=seed, switch_epoch=1))
    beta0 = run("beta0_s0", replace(base_cfg, beta=0.0))
    return {"model_cfg": model_cfg, "train_cfg": base_cfg, "corpus": corpus,
            "tokenizer_dir": tok_dir, "progressive": progressive,
            "immediate": immediate, "beta0": beta0}
