"""Cached decoding against a from-scratch recompute oracle."""

import numpy as np
import pytest

from hdlm import counter
from hdlm.errors import ConfigError, DataError, ProtocolError, UsageError
from hdlm.inference import DecodeState, GenerationConfig, decode_level, generate, prefill
from hdlm.model import ModelConfig, head_logits, segment_forward
from hdlm.tensor import Tensor, gather_rows
from hdlm.training import HierSample, build_segment_stream

from conftest import make_model, tiny_cfg, two_level_cfg


# ---------------------------------------------------------------------------
# reference decoder: no caches, rebuilds every segment from scratch each step
# ---------------------------------------------------------------------------

def reference_generate(params, cfg, query_ids, stop_ids, max_len):
    """Greedy decode by re-running the dense tape path on the full
    materialized stream before every token. Returns per-level ids and the
    per-step logits rows."""
    decoded = [np.empty(0, dtype=np.int64) for _ in range(cfg.depth)]
    all_logits = [[] for _ in range(cfg.depth)]
    for d in range(1, cfg.depth + 1):
        while decoded[d - 1].size < max_len:
            hidden = _dense_chain(params, cfg, query_ids, decoded, d)
            logits = head_logits(d, gather_rows(hidden, np.array([hidden.shape[0] - 1])), params)
            row = logits.data[0]
            all_logits[d - 1].append(row.copy())
            tok = int(np.argmax(row))
            decoded[d - 1] = np.append(decoded[d - 1], tok)
            if tok == stop_ids[d - 1]:
                break
    return decoded, all_logits


def _dense_chain(params, cfg, query_ids, decoded, through_level):
    sample = HierSample(query_ids, decoded[:through_level])
    hidden = None
    for d in range(1, through_level + 1):
        st = build_segment_stream(sample, d)
        if d > 1:
            st = st.with_latents(hidden)
        hidden = segment_forward(st, params, cfg.segment_ranges()[d - 1], cfg)
    return hidden


def cached_step_logits(state, level_row_start, n_tokens, head_level, params):
    """Recover each decode step's logits from the latents the cached decoder
    kept: step j read the row just before the token it emitted."""
    out = []
    for j in range(n_tokens):
        h = state.latents[level_row_start - 1 + j]
        out.append(h @ params.heads[head_level - 1].data)
    return out


# ---------------------------------------------------------------------------
# cache consistency
# ---------------------------------------------------------------------------

def test_cached_matches_recompute_depth2():
    cfg = two_level_cfg(n_layers=3, hidden=16, n_heads=2, vocab=13, schedule=(1,))
    params = make_model(cfg, seed=5)
    q = np.array([1, 4, 2, 9])
    stop = [0, 3]
    gcfg = GenerationConfig(max_len=6)

    ref_ids, ref_logits = reference_generate(params, cfg, q, stop, gcfg.max_len)

    state = prefill(params, cfg, q)
    ids1, _ = decode_level(state, 1, gcfg, stop[0])
    got1 = cached_step_logits(state, q.size, ids1.size, 1, params)
    ids2, _ = decode_level(state, 2, gcfg, stop[1])
    got2 = cached_step_logits(state, q.size + ids1.size, ids2.size, 2, params)

    np.testing.assert_array_equal(ids1, ref_ids[0])
    np.testing.assert_array_equal(ids2, ref_ids[1])
    for got, ref in zip(got1, ref_logits[0]):
        assert np.max(np.abs(got - ref)) < 1e-10
    for got, ref in zip(got2, ref_logits[1]):
        assert np.max(np.abs(got - ref)) < 1e-10


def test_cached_matches_recompute_depth3():
    cfg = tiny_cfg(n_layers=4, hidden=8, n_heads=2, vocab=9, depth=3,
                   schedule=(1, 3), loss_weights=(1.0, 1.0))
    params = make_model(cfg, seed=11)
    q = np.array([2, 7])
    stop = [0, 1, 3]
    gcfg = GenerationConfig(max_len=5)

    ref_ids, ref_logits = reference_generate(params, cfg, q, stop, gcfg.max_len)
    out = generate(params, cfg, q, gcfg, stop)

    starts = np.concatenate([[q.size], q.size + np.cumsum(out.lengths)])[:-1]
    state = prefill(params, cfg, q)
    for d in range(1, 4):
        ids, _ = decode_level(state, d, gcfg, stop[d - 1])
        np.testing.assert_array_equal(ids, ref_ids[d - 1])
        got = cached_step_logits(state, int(starts[d - 1]), ids.size, d, params)
        for g, r in zip(got, ref_logits[d - 1]):
            assert np.max(np.abs(g - r)) < 1e-10


def test_generate_deterministic_greedy():
    cfg = two_level_cfg(hidden=8, vocab=11)
    params = make_model(cfg, seed=3)
    q = np.array([5, 6, 1])
    a = generate(params, cfg, q, GenerationConfig(max_len=4), [0, 2])
    b = generate(params, cfg, q, GenerationConfig(max_len=4), [0, 2])
    for ta, tb in zip(a.token_ids, b.token_ids):
        np.testing.assert_array_equal(ta, tb)
    assert a.mean_logprob == b.mean_logprob
    assert a.lengths == [t.size for t in a.token_ids]


# ---------------------------------------------------------------------------
# sampling controls
# ---------------------------------------------------------------------------

def test_temperature_sampling_reproducible():
    cfg = tiny_cfg()
    params = make_model(cfg, seed=1)
    q = np.array([3, 2])
    g = GenerationConfig(max_len=5, temperature=0.8, seed=77)
    a = generate(params, cfg, q, g, [0])
    b = generate(params, cfg, q, g, [0])
    np.testing.assert_array_equal(a.token_ids[0], b.token_ids[0])
    assert a.mean_logprob == b.mean_logprob


def test_top_k_one_equals_greedy():
    cfg = tiny_cfg()
    params = make_model(cfg, seed=9)
    q = np.array([1, 8, 4])
    greedy = generate(params, cfg, q, GenerationConfig(max_len=6), [0])
    topk1 = generate(params, cfg, q, GenerationConfig(max_len=6, temperature=1.0, top_k=1, seed=5), [0])
    np.testing.assert_array_equal(greedy.token_ids[0], topk1.token_ids[0])


def test_mean_logprob_is_nonpositive():
    cfg = two_level_cfg()
    params = make_model(cfg, seed=2)
    out = generate(params, cfg, np.array([1, 2, 3]), GenerationConfig(max_len=4), [0, 5])
    for lp in out.mean_logprob:
        assert np.isfinite(lp) and lp <= 0.0


def test_stop_token_ends_level_and_is_kept():
    cfg = tiny_cfg(hidden=8, vocab=11)
    params = make_model(cfg, seed=4)
    probe = generate(params, cfg, np.array([1, 2]), GenerationConfig(max_len=8), [cfg.vocab - 1])
    first = int(probe.token_ids[0][0])
    out = generate(params, cfg, np.array([1, 2]), GenerationConfig(max_len=8), [first])
    assert out.token_ids[0].tolist() == [first]
    assert out.lengths == [1]


def test_max_len_caps_generation():
    cfg = tiny_cfg(vocab=11)
    params = make_model(cfg, seed=6)
    params.heads[0].data[:, 9] = 50.0  # never emits the stop token 0
    out = generate(params, cfg, np.array([4]), GenerationConfig(max_len=3), [0])
    assert out.lengths == [3]
    assert 0 not in out.token_ids[0]


# ---------------------------------------------------------------------------
# protocol and validation
# ---------------------------------------------------------------------------

def test_levels_must_decode_in_order():
    cfg = two_level_cfg()
    params = make_model(cfg)
    state = prefill(params, cfg, np.array([1, 2]))
    with pytest.raises(ProtocolError):
        decode_level(state, 2, GenerationConfig(max_len=2), 0)
    decode_level(state, 1, GenerationConfig(max_len=2), 0)
    with pytest.raises(ProtocolError):
        decode_level(state, 1, GenerationConfig(max_len=2), 0)
    decode_level(state, 2, GenerationConfig(max_len=2), 0)
    with pytest.raises(ProtocolError):
        decode_level(state, 3, GenerationConfig(max_len=2), 0)


def test_prefill_rejects_bad_input():
    cfg = tiny_cfg()
    params = make_model(cfg)
    with pytest.raises(DataError):
        prefill(params, cfg, np.array([], dtype=np.int64))
    with pytest.raises(DataError):
        prefill(params, cfg, np.array([cfg.vocab]))
    with pytest.raises(UsageError):
        prefill(params, cfg, np.array([1]), mode="fast")


def test_generation_config_validation():
    with pytest.raises(ConfigError):
        GenerationConfig(max_len=0)
    with pytest.raises(ConfigError):
        GenerationConfig(temperature=-0.1)
    cfg = two_level_cfg()
    with pytest.raises(UsageError):
        generate(make_model(cfg), cfg, np.array([1]), GenerationConfig(), [0])


# ---------------------------------------------------------------------------
# flat mode and traversal accounting
# ---------------------------------------------------------------------------

def test_flat_equals_hier_at_depth_one():
    cfg = tiny_cfg(n_layers=3, hidden=8, vocab=11)
    params = make_model(cfg, seed=8)
    q = np.array([2, 5, 9])
    a = generate(params, cfg, q, GenerationConfig(max_len=5), [0], mode="hier")
    b = generate(params, cfg, q, GenerationConfig(max_len=5), [0], mode="flat")
    np.testing.assert_array_equal(a.token_ids[0], b.token_ids[0])
    assert a.mean_logprob == b.mean_logprob


def test_flat_mode_decodes_every_level_with_full_stack():
    cfg = two_level_cfg(n_layers=3, hidden=8, vocab=11, schedule=(1,))
    params = make_model(cfg, seed=10)
    q = np.array([1, 2, 3])
    with counter.count_ops() as ops:
        generate(params, cfg, q, GenerationConfig(max_len=3), [0, 4], mode="flat")
    per_token = _traversals_by_phase(ops, "decode:")
    assert per_token and all(n == cfg.n_layers for n in per_token.values())


def _traversals_by_phase(ops, prefix):
    counts = {}
    for ev in ops.layer_events:
        if ev.phase.startswith(prefix):
            counts[ev.phase] = counts.get(ev.phase, 0) + 1
    return counts


def test_hier_level2_tokens_traverse_only_late_layers():
    cfg = two_level_cfg(n_layers=3, hidden=8, vocab=11, schedule=(1,))
    params = make_model(cfg, seed=12)
    with counter.count_ops() as ops:
        generate(params, cfg, np.array([1, 2]), GenerationConfig(max_len=3), [0, 4])
    per_token = _traversals_by_phase(ops, "decode:level2:")
    assert per_token and all(n == cfg.n_layers - cfg.schedule[0] for n in per_token.values())
    per_token1 = _traversals_by_phase(ops, "decode:level1:")
    assert per_token1 and all(n == cfg.schedule[0] for n in per_token1.values())
    boundary = [ev for ev in ops.layer_events if ev.phase == "boundary:level2"]
    assert len(boundary) == cfg.n_layers - cfg.schedule[0]
    assert all(ev.rows == boundary[0].rows for ev in boundary)


def test_prefill_covers_first_segment_only():
    cfg = two_level_cfg(n_layers=4, hidden=8, vocab=11, schedule=(3,))
    params = make_model(cfg, seed=13)
    with counter.count_ops() as ops:
        prefill(params, cfg, np.array([1, 2, 3, 4, 5]))
    layers = [ev.layer for ev in ops.layer_events if ev.phase == "prefill"]
    assert layers == [0, 1, 2]
    assert all(ev.rows == 5 for ev in ops.layer_events)


def test_decode_stops_at_model_capacity():
    cfg = two_level_cfg(max_positions=5)
    params = make_model(cfg, seed=21)
    gcfg = GenerationConfig(max_len=16)
    with pytest.raises(DataError, match="capacity"):
        generate(params, cfg, [1, 2, 3], gcfg, stop_ids=[10, 10])
