import json
import os
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from aslkv.errors import ArgumentError, FormatError
from aslkv.model import ModelConfig, build_model, random_tokens
from aslkv.policies import PruneConfig, run_asl, run_asl_2pass
from aslkv.report import build_report, emit_report, parse_report, replay
from aslkv.trace import (
    ScoreTrace,
    SyntheticTraceSpec,
    dumps_trace,
    gen_trace,
    loads_trace,
    read_trace,
    replay_decision,
    trace_from_run,
    write_trace,
)

DATA = Path(__file__).parent / "data"
FIXTURE = DATA / "fixture.jsonl"
GOLDEN = DATA / "canonical_report.json"
CANONICAL = PruneConfig(policy="asl", kv_budget=64, window_size=32, kernel_size=7, tau=0.3, lmin=10, lobs=8)


@pytest.fixture(scope="module")
def fixture_trace():
    return read_trace(FIXTURE)


class TestTraceFormat:
    def test_checked_in_fixture_is_the_canonical_generator_output(self, fixture_trace):
        assert FIXTURE.read_text() == dumps_trace(gen_trace(SyntheticTraceSpec()))

    def test_file_round_trip(self, tmp_path, fixture_trace):
        out = tmp_path / "copy.jsonl"
        write_trace(fixture_trace, out)
        assert out.read_bytes() == FIXTURE.read_bytes()

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(2, 12), st.integers(2, 40))
    def test_text_round_trip(self, seed, L, T):
        rng = np.random.default_rng(seed)
        scores = [(rng.random(T) * 10.0 ** rng.integers(-8, 3)).astype(np.float32) for _ in range(L)]
        text = dumps_trace(ScoreTrace(metadata={"num_layers": L, "n": T + 3, "window_size": 3}, scores=scores))
        again = loads_trace(text)
        assert dumps_trace(again) == text
        assert all(np.array_equal(a, b) for a, b in zip(again.scores, scores))

    def test_bad_version(self, fixture_trace):
        lines = dumps_trace(fixture_trace).split("\n")
        header = json.loads(lines[0])
        header["format_version"] = 2
        lines[0] = json.dumps(header)
        with pytest.raises(FormatError):
            loads_trace("\n".join(lines))

    def test_truncated_mid_record(self):
        text = FIXTURE.read_text()
        with pytest.raises(FormatError):
            loads_trace(text[: len(text) // 2])

    def test_layer_gap(self):
        lines = FIXTURE.read_text().split("\n")
        del lines[5]
        with pytest.raises(FormatError):
            loads_trace("\n".join(lines))

    def test_wrong_vector_length(self):
        with pytest.raises(FormatError):
            ScoreTrace(metadata={"num_layers": 2, "n": 10, "window_size": 4}, scores=[np.ones(5)])

    def test_missing_metadata(self):
        with pytest.raises(FormatError):
            ScoreTrace(metadata={"n": 10})

    def test_not_a_trace(self):
        with pytest.raises(FormatError):
            loads_trace('{"format":"other","format_version":1,"metadata":{}}\n')

    def test_whole_layer_prefix_without_decision(self, fixture_trace):
        short = ScoreTrace(metadata=fixture_trace.metadata, scores=fixture_trace.scores[:15])
        with pytest.raises(FormatError):
            replay(short, CANONICAL)

    def test_prefix_past_decision_replays(self, fixture_trace):
        short = ScoreTrace(metadata=fixture_trace.metadata, scores=fixture_trace.scores[:21])
        assert replay(short, CANONICAL).selection_layer == 20

    def test_written_file_mode_follows_umask(self, tmp_path):
        out = tmp_path / "t.jsonl"
        write_trace(gen_trace(SyntheticTraceSpec(num_layers=4, n=40, window_size=4, uniform_until=1, localize_from=2, focus_size=4)), out)
        mask = os.umask(0)
        os.umask(mask)
        assert out.stat().st_mode & 0o777 == 0o666 & ~mask


class TestGenerator:
    def test_deterministic(self):
        assert dumps_trace(gen_trace(SyntheticTraceSpec(seed=7))) == dumps_trace(gen_trace(SyntheticTraceSpec(seed=7)))
        assert dumps_trace(gen_trace(SyntheticTraceSpec(seed=7))) != dumps_trace(gen_trace(SyntheticTraceSpec(seed=8)))

    @pytest.mark.parametrize(
        "kw",
        [
            dict(uniform_until=20, localize_from=18),
            dict(localize_from=32),
            dict(focus_size=481),
            dict(focus_size=0),
            dict(noise=-1.0),
            dict(n=32),
        ],
    )
    def test_invalid_specs(self, kw):
        with pytest.raises(ArgumentError):
            SyntheticTraceSpec(**kw)

    def test_localizing_layers_concentrate_on_focus(self, fixture_trace):
        T = fixture_trace.n - fixture_trace.window_size
        top_share = [np.sort(v)[-32:].sum() for v in fixture_trace.scores]
        assert top_share[5] < 32 / T * 1.5
        assert top_share[25] > 3 * 32 / T
        assert all(a <= b for a, b in zip(top_share[18:], top_share[19:]))

    def test_relative_variance_curve_falls(self, fixture_trace):
        ratios = replay_decision(fixture_trace, replace(CANONICAL, tau=0.0).asl_config(32)).relative_variances
        assert ratios[10] == 1.0
        late = [ratios[layer] for layer in range(20, 32)]
        assert max(late) < 0.3
        assert ratios[31] < ratios[20]


class TestReplay:
    def test_golden_report(self, fixture_trace):
        assert emit_report(replay(fixture_trace, CANONICAL)) == GOLDEN.read_bytes()

    def test_golden_agrees_with_oracle(self, fixture_trace):
        golden = parse_report(GOLDEN.read_bytes())
        vectors = [v.astype(np.float64).tolist() for v in fixture_trace.scores]
        layer, chosen, ratios, fallback = oracles.replay(vectors, 10, 8, 0.3, 64, 32)
        assert (golden.selection_layer, golden.fallback, golden.selected_count) == (layer, fallback, len(chosen))
        for l, r in ratios.items():
            assert golden.relative_variances[l] == pytest.approx(r, rel=1e-8)

    def test_tau_sweep_non_increasing(self, fixture_trace):
        layers = [replay(fixture_trace, replace(CANONICAL, tau=t)).selection_layer for t in (0.2, 0.3, 0.4, 0.5, 0.6)]
        assert layers == sorted(layers, reverse=True)
        assert layers[1] == 20

    def test_two_pass_contract(self, fixture_trace):
        report = replay(fixture_trace, replace(CANONICAL, policy="asl_2pass"))
        assert report.cache_sizes == [64] * 32

    def test_full_pre_selection_contract(self, fixture_trace):
        report = replay(fixture_trace, replace(CANONICAL, pre_selection_budget="full"))
        assert report.cache_sizes == [512] * 21 + [64] * 11

    def test_rejects_fixed_layer_policy(self, fixture_trace):
        with pytest.raises(ArgumentError):
            replay(fixture_trace, PruneConfig(policy="fastkv", kv_budget=64, window_size=32, fixed_selection_layer=3))

    def test_window_mismatch(self, fixture_trace):
        with pytest.raises(ArgumentError):
            replay(fixture_trace, replace(CANONICAL, window_size=16))


@pytest.fixture(scope="module")
def live():
    model_config = ModelConfig(num_layers=12, num_q_heads=4, num_kv_heads=2, head_dim=8, hidden_dim=32, vocab_size=97, rng_seed=3)
    model = build_model(model_config)
    tokens = random_tokens(64, 97, 3)
    return model_config, model, tokens


@pytest.mark.parametrize("policy,tau", [("asl", 0.99), ("asl", 2.0), ("asl", 0.0), ("asl_2pass", 0.99)])
def test_live_run_replays_to_identical_report(tmp_path, live, policy, tau):
    model_config, model, tokens = live
    cfg = PruneConfig(policy=policy, kv_budget=16, window_size=4, kernel_size=3, lobs=4, lmin=4, tau=tau)
    runner = run_asl if policy == "asl" else run_asl_2pass
    _, metrics = runner(model, tokens, cfg)
    path = tmp_path / "live.jsonl"
    write_trace(trace_from_run(metrics, model_config, cfg), path)
    assert emit_report(replay(read_trace(path), cfg)) == emit_report(build_report(cfg, metrics, model_config))


class TestEmit:
    def test_json_round_trip(self, fixture_trace):
        data = emit_report(replay(fixture_trace, CANONICAL))
        assert emit_report(parse_report(data)) == data

    def test_json_is_canonical(self):
        text = GOLDEN.read_text()
        assert text.endswith("}\n")
        assert text == json.dumps(json.loads(text), sort_keys=True, indent=2) + "\n"

    def test_csv_shape(self, fixture_trace):
        rows = emit_report(replay(fixture_trace, CANONICAL), "csv").decode().splitlines()
        assert len(rows) == 32 + 1
        assert rows[0] == "layer,relative_variance,cache_size"
        assert rows[1] == "0,,64"
        assert rows[11].startswith("10,1,")

    def test_unknown_format(self, fixture_trace):
        with pytest.raises(ArgumentError):
            emit_report(replay(fixture_trace, CANONICAL), "xml")

    def test_parse_garbage(self):
        with pytest.raises(FormatError):
            parse_report(b"{not json")
        with pytest.raises(FormatError):
            parse_report(b'{"unexpected": 1}')
