import json
import math

import numpy as np
import pytest
import torch

from sra.analysis import (
    anchor_dispersion_stats,
    format_dispersion,
    format_specialization,
    format_trace,
    format_utilization,
    routing_trace,
    specialization_table,
    utilization,
    write_dispersion_report,
    write_specialization_report,
    write_trace_report,
    write_utilization_report,
)
from sra.data import train_bpe
from sra.model import ModelConfig, build_model
from sra.router import AnchorSet, LayerRecord, RoutingRecord, init_anchors_orthogonal
from sra.training import evaluate


def make_record(indices, token_ids=None, meta=None) -> RoutingRecord:
    indices = np.asarray(indices, dtype=np.int64)
    n, k = indices.shape
    if token_ids is None:
        token_ids = np.zeros(n, dtype=np.int64)
    layer = LayerRecord(
        indices=indices,
        weights=np.full((n, k), 1.0 / k),
        positions=np.arange(n, dtype=np.int64),
        token_ids=np.asarray(token_ids, dtype=np.int64),
    )
    return RoutingRecord(layers=[layer], meta=meta or {})


class TestUtilization:
    def test_all_tokens_to_one_of_two_experts(self):
        record = make_record([[0]] * 10)
        stats = utilization(record, n_experts=2)
        layer = stats.layers[0]
        assert layer.counts.tolist() == [10, 0]
        assert layer.cv == pytest.approx(1.0)  # std 5, mean 5
        assert layer.dead == 1 and layer.dead_ids == [1]
        assert stats.total_dead == 1

    def test_uniform_usage_has_zero_cv(self):
        record = make_record([[i % 4] for i in range(40)])
        stats = utilization(record, n_experts=4)
        assert stats.layers[0].cv == pytest.approx(0.0)
        assert stats.layers[0].dead == 0

    def test_slot_counts_sum_to_k_times_tokens(self):
        rng = np.random.default_rng(0)
        idx = np.stack([rng.permutation(8)[:2] for _ in range(100)])
        stats = utilization(make_record(idx), n_experts=8)
        assert int(stats.layers[0].counts.sum()) == 2 * 100
        assert stats.k == 2 and stats.n_tokens == 100

    def test_rejects_out_of_range_expert(self):
        with pytest.raises(ValueError):
            utilization(make_record([[3]]), n_experts=2)

    def test_rejects_empty_record(self):
        with pytest.raises(ValueError):
            utilization(RoutingRecord(layers=[], meta={}), n_experts=2)


@pytest.fixture(scope="module")
def tok():
    return train_bpe("the quick brown fox " * 10, vocab_size=280)


@pytest.fixture(scope="module")
def traced_model_and_tok():
    corpus = ("The film was released in December and received positive "
              "reviews. ") * 20
    tokenizer = train_bpe(corpus, vocab_size=300)
    cfg = ModelConfig(dim=16, n_layers=2, n_heads=2, n_experts=4, top_k=2,
                      d_ff=16, vocab_size=300, max_seq_len=64, dropout=0.0)
    return build_model(cfg, seed=0), tokenizer


class TestSpecialization:

    def test_count_ranked(self, tok):
        record = make_record([[0], [0], [0], [0], [1]],
                             token_ids=[101, 101, 101, 103, 105],
                             meta={"n_experts": 2})
        table = specialization_table(record, tok, top_m=2)
        assert [t[0] for t in table[0].top_tokens] == [101, 103]
        assert table[0].top_tokens[0][2] == 3  # count
        assert [t[0] for t in table[1].top_tokens] == [105]

    def test_ties_break_to_lower_token_id(self, tok):
        record = make_record([[0]] * 5, token_ids=[105, 103, 105, 103, 108],
                             meta={"n_experts": 1})
        table = specialization_table(record, tok, top_m=2)
        assert [t[0] for t in table[0].top_tokens] == [103, 105]

    def test_dead_expert_has_empty_list(self, tok):
        record = make_record([[0]] * 3, token_ids=[101, 101, 102],
                             meta={"n_experts": 3})
        table = specialization_table(record, tok, top_m=4)
        assert table[1].top_tokens == [] and table[2].top_tokens == []

    def test_printable_forms_come_from_tokenizer(self, tok):
        record = make_record([[0]], token_ids=[ord("q")], meta={"n_experts": 1})
        table = specialization_table(record, tok, top_m=1)
        assert table[0].top_tokens[0][1] == "q"

    def test_counts_slots_not_tokens_for_k2(self, tok):
        record = make_record([[0, 1], [0, 1]], token_ids=[101, 101],
                             meta={"n_experts": 2})
        table = specialization_table(record, tok, top_m=1)
        assert table[0].top_tokens[0][2] == 2
        assert table[1].top_tokens[0][2] == 2

    def test_rejects_bad_layer(self, tok):
        record = make_record([[0]], token_ids=[101])
        with pytest.raises(ValueError):
            specialization_table(record, tok, layer=1)

    def test_rejects_missing_token_ids(self, tok):
        record = make_record([[0]], token_ids=[-1])
        with pytest.raises(ValueError):
            specialization_table(record, tok)


class TestRoutingTrace:
    def test_one_step_per_token(self, traced_model_and_tok):
        model, tok = traced_model_and_tok
        text = "The film was released"
        steps = routing_trace(model, tok, text, layer=0)
        assert len(steps) == len(tok.encode(text))
        assert [s.position for s in steps] == list(range(len(steps)))

    def test_weights_form_a_simplex(self, traced_model_and_tok):
        model, tok = traced_model_and_tok
        steps = routing_trace(model, tok, "positive reviews", layer=1)
        for s in steps:
            weights = [w for _, w in s.experts]
            assert len(weights) == 2
            assert sum(weights) == pytest.approx(1.0, abs=1e-5)
            assert weights == sorted(weights, reverse=True)
            assert all(0 <= e < 4 for e, _ in s.experts)

    def test_k1_single_expert_weight_one(self, traced_model_and_tok):
        _, tok = traced_model_and_tok
        cfg = ModelConfig(dim=16, n_layers=1, n_heads=2, n_experts=4, top_k=1,
                          d_ff=16, vocab_size=300, max_seq_len=64, dropout=0.0)
        model = build_model(cfg, seed=1)
        steps = routing_trace(model, tok, "The film", layer=0)
        for s in steps:
            assert len(s.experts) == 1
            assert s.experts[0][1] == pytest.approx(1.0)

    def test_token_strings_match_tokenizer(self, traced_model_and_tok):
        model, tok = traced_model_and_tok
        steps = routing_trace(model, tok, "December", layer=0)
        ids = tok.encode("December")
        for s, tid in zip(steps, ids):
            assert s.token_id == int(tid)
            assert s.token == tok.token_str(int(tid))

    def test_matches_evaluate_records(self, traced_model_and_tok):
        # evaluating a stream of len(ids)+1 with one lane and window len(ids)
        # forwards exactly ids, so the records must agree with the trace
        model, tok = traced_model_and_tok
        text = "The film was released in December"
        ids = tok.encode(text)
        steps = routing_trace(model, tok, text, layer=0)
        stream = np.append(ids, ids[0])
        result = evaluate(model, stream, batch_size=1, seq_len=len(ids))
        layer0 = result.records.layers[0]
        assert len(layer0) == len(steps)
        for s in steps:
            np.testing.assert_array_equal(layer0.indices[s.position],
                                          [e for e, _ in s.experts])
            np.testing.assert_allclose(layer0.weights[s.position],
                                       [w for _, w in s.experts], atol=1e-6)

    def test_rejects_dense(self, traced_model_and_tok):
        _, tok = traced_model_and_tok
        cfg = ModelConfig(dim=16, n_layers=1, n_heads=2, variant="dense",
                          d_ff=16, vocab_size=300, max_seq_len=64, dropout=0.0)
        model = build_model(cfg, seed=0)
        with pytest.raises(ValueError):
            routing_trace(model, tok, "The film", layer=0)

    def test_rejects_bad_layer_and_empty_prompt(self, traced_model_and_tok):
        model, tok = traced_model_and_tok
        with pytest.raises(ValueError):
            routing_trace(model, tok, "The film", layer=2)
        with pytest.raises(ValueError):
            routing_trace(model, tok, "", layer=0)


class TestDispersionStats:
    def test_single_45_degree_pair(self):
        anchors = AnchorSet(torch.tensor([[1.0, 0.0], [1.0, 1.0]]))
        stats = anchor_dispersion_stats(anchors)
        assert stats.mean == pytest.approx(0.70710678, abs=1e-6)
        assert stats.std == pytest.approx(0.0, abs=1e-9)
        assert stats.n_pairs == 1
        assert sum(stats.histogram) == 1
        assert stats.histogram[17] == 1  # bucket [0.7, 0.8)

    def test_orthogonal_init_mean_near_zero(self):
        anchors = init_anchors_orthogonal(8, 16, seed=0)
        stats = anchor_dispersion_stats(anchors)
        assert abs(stats.mean) < 1e-5
        assert stats.std == pytest.approx(0.0, abs=1e-5)
        assert stats.n_pairs == 8 * 7 // 2

    def test_identical_anchors_fill_last_bucket(self):
        stats = anchor_dispersion_stats(AnchorSet(torch.ones(4, 3)))
        assert stats.mean == pytest.approx(1.0)
        assert stats.histogram[-1] == stats.n_pairs == 6

    def test_antipodal_pair_fills_first_bucket(self):
        anchors = AnchorSet(torch.tensor([[1.0, 0.0], [-1.0, 0.0]]))
        stats = anchor_dispersion_stats(anchors)
        assert stats.mean == pytest.approx(-1.0)
        assert stats.histogram[0] == 1

    def test_default_buckets_span_full_range(self):
        stats = anchor_dispersion_stats(init_anchors_orthogonal(4, 8, seed=1))
        assert len(stats.histogram) == 20
        assert len(stats.bin_edges) == 21
        assert stats.bin_edges[0] == -1.0 and stats.bin_edges[-1] == 1.0

    def test_mean_matches_direct_loop(self):
        a = torch.randn(6, 5, generator=torch.Generator().manual_seed(2))
        stats = anchor_dispersion_stats(AnchorSet(a))
        vals = []
        for i in range(6):
            for j in range(i + 1, 6):
                vals.append(float(
                    a[i] @ a[j] / (a[i].norm() * a[j].norm())))
        assert stats.mean == pytest.approx(np.mean(vals), abs=1e-6)
        assert stats.std == pytest.approx(np.std(vals), abs=1e-6)


class TestFormattingAndReports:
    def test_utilization_report_files(self, tmp_path):
        stats = utilization(make_record([[0], [0], [1]]), n_experts=3)
        write_utilization_report(stats, tmp_path)
        payload = json.loads((tmp_path / "utilization.json").read_text())
        assert payload["layers"][0]["counts"] == [2, 1, 0]
        assert payload["total_dead"] == 1
        text = (tmp_path / "utilization.txt").read_text()
        assert "total dead: 1" in text

    def test_specialization_report_files(self, tmp_path):
        tok = train_bpe("ababab", vocab_size=258)
        record = make_record([[0], [1]], token_ids=[97, 98],
                             meta={"n_experts": 2})
        table = specialization_table(record, tok, top_m=1)
        write_specialization_report({0: table}, tmp_path)
        payload = json.loads((tmp_path / "specialization.json").read_text())
        assert payload["0"][0]["top_tokens"][0]["token"] == "a"
        assert "expert" in (tmp_path / "specialization.txt").read_text()

    def test_dispersion_report_files(self, tmp_path):
        stats = [anchor_dispersion_stats(init_anchors_orthogonal(4, 8, seed=s))
                 for s in (0, 1)]
        write_dispersion_report(stats, tmp_path)
        payload = json.loads((tmp_path / "dispersion.json").read_text())
        assert len(payload) == 2 and "histogram" in payload[0]
        csv_lines = (tmp_path / "dispersion_histogram.csv").read_text().splitlines()
        assert csv_lines[0] == "layer,bin_left,bin_right,count"
        assert len(csv_lines) == 1 + 2 * 20

    def test_trace_report_files(self, tmp_path):
        corpus = "the cat sat on the mat " * 10
        tok = train_bpe(corpus, vocab_size=280)
        cfg = ModelConfig(dim=16, n_layers=1, n_heads=2, n_experts=4, top_k=2,
                          d_ff=16, vocab_size=280, max_seq_len=32, dropout=0.0)
        model = build_model(cfg, seed=0)
        steps = routing_trace(model, tok, "the cat sat", layer=0)
        write_trace_report(steps, layer=0, out_dir=tmp_path)
        assert (tmp_path / "trace.txt").exists()
        payload = json.loads((tmp_path / "trace.json").read_text())
        assert len(payload["steps"]) == len(steps)

    def test_format_functions_return_text(self):
        stats = utilization(make_record([[0], [1]]), n_experts=2)
        assert "Layer" in format_utilization(stats)
        tok = train_bpe("abab", vocab_size=258)
        table = specialization_table(
            make_record([[0]], token_ids=[97], meta={"n_experts": 1}), tok)
        assert "expert" in format_specialization(table, 0)
        anchors = init_anchors_orthogonal(4, 8, seed=0)
        assert "Mean cos" in format_dispersion([anchor_dispersion_stats(anchors)])

    def test_format_trace_layout(self):
        corpus = "the cat sat on the mat " * 10
        tok = train_bpe(corpus, vocab_size=280)
        cfg = ModelConfig(dim=16, n_layers=1, n_heads=2, n_experts=4, top_k=2,
                          d_ff=16, vocab_size=280, max_seq_len=32, dropout=0.0)
        model = build_model(cfg, seed=0)
        steps = routing_trace(model, tok, "the cat", layer=0)
        text = format_trace(steps, layer=0)
        assert "Expert 1 (weight)" in text and "Expert 2 (weight)" in text
        assert len(text.splitlines()) == 2 + len(steps)
