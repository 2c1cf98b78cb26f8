"""Training: stream layout, loss composition, optimizer, and the loop."""

import math

import numpy as np
import pytest
from conftest import make_model, tiny_cfg, two_level_cfg

from hdlm.errors import ConfigError, DataError, DivergenceError, UsageError
from hdlm.model import segment_forward
from hdlm.tensor import Tape, backward
from hdlm.training import (
    HierSample,
    OptimizerState,
    TrainConfig,
    adamw_update,
    build_segment_stream,
    concat_streams,
    cosine_schedule,
    hierarchical_loss,
    level_loss,
    train_loop,
    train_step,
)


def sample_4_2_2(vocab=11, seed=0):
    rng = np.random.default_rng(seed)
    return HierSample(
        query=rng.integers(0, vocab, size=4),
        responses=[rng.integers(0, vocab, size=2), rng.integers(0, vocab, size=2)],
    )


# ---------------------------------------------------------------------------
# stream layout
# ---------------------------------------------------------------------------

def test_stream_level_one_injects_query_and_response():
    s = sample_4_2_2()
    st = build_segment_stream(s, 1)
    assert st.n_rows == 6
    assert st.latent_rows.size == 0
    np.testing.assert_array_equal(st.token_ids, np.concatenate([s.query, s.responses[0]]))
    np.testing.assert_array_equal(st.loss_rows, [3, 4])
    np.testing.assert_array_equal(st.loss_targets, s.responses[0])
    np.testing.assert_array_equal(st.positions, np.arange(6))


def test_stream_level_two_carries_prefix():
    s = sample_4_2_2()
    st = build_segment_stream(s, 2)
    assert st.n_rows == 8
    np.testing.assert_array_equal(st.latent_rows, np.arange(6))
    np.testing.assert_array_equal(st.token_rows, [6, 7])
    np.testing.assert_array_equal(st.token_ids, s.responses[1])
    np.testing.assert_array_equal(st.loss_rows, [5, 6])
    np.testing.assert_array_equal(st.loss_targets, s.responses[1])
    assert st.roles[5] == "response:1" and st.roles[6] == "response:2"


def test_stream_flat_scores_every_response_token():
    st = build_segment_stream(sample_4_2_2(), 1, mode="flat")
    assert st.n_rows == 8
    assert st.latent_rows.size == 0
    np.testing.assert_array_equal(st.loss_rows, [3, 4, 5, 6])
    with pytest.raises(UsageError):
        build_segment_stream(sample_4_2_2(), 2, mode="flat")


def test_stream_rejects_bad_level():
    with pytest.raises(UsageError):
        build_segment_stream(sample_4_2_2(), 3)
    with pytest.raises(DataError):
        HierSample(query=np.array([]), responses=[])


def test_concat_streams_blocks_cross_sample_attention():
    a = build_segment_stream(sample_4_2_2(seed=1), 1)
    b = build_segment_stream(sample_4_2_2(seed=2), 1)
    big, offsets = concat_streams([a, b])
    np.testing.assert_array_equal(offsets, [0, 6])
    assert big.n_rows == 12
    assert not big.attention_mask[6:, :6].any()
    assert not big.attention_mask[:6, 6:].any()
    np.testing.assert_array_equal(big.positions[6:], np.arange(6))
    np.testing.assert_array_equal(big.loss_rows, [3, 4, 9, 10])


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

def test_cosine_schedule_landmarks():
    total, base = 1000, 0.1
    warmup = 30  # 0.03 * 1000
    assert cosine_schedule(warmup, total, base) == base
    assert cosine_schedule(0, total, base) == 0.0
    mid = warmup + (total - warmup) // 2
    assert abs(cosine_schedule(mid, total, base) - base / 2) < 1e-15
    assert abs(cosine_schedule(total, total, base)) < 1e-15
    assert cosine_schedule(0, total, base, warmup_frac=0.0) == base
    with pytest.raises(ConfigError):
        cosine_schedule(0, 0, base)


# ---------------------------------------------------------------------------
# loss composition
# ---------------------------------------------------------------------------

def test_hier_total_is_weighted_sum_of_levels():
    cfg = two_level_cfg(loss_weights=(2.0,))
    params = make_model(cfg, seed=1)
    batch = [sample_4_2_2(seed=i) for i in range(3)]
    total, bd = hierarchical_loss(params, batch, cfg)
    want = 2.0 * bd.per_level[0] + bd.per_level[1]
    assert abs(bd.total - want) < 1e-12
    assert bd.weights == [2.0, 1.0]
    assert bd.tokens_per_level == [6, 6]
    assert abs(total.item() - bd.total) < 1e-15


def test_fresh_model_loss_sits_near_uniform():
    cfg = two_level_cfg()
    params = make_model(cfg, seed=2)
    _, bd = hierarchical_loss(params, [sample_4_2_2(seed=9)], cfg)
    for lvl in bd.per_level:
        assert abs(lvl - math.log(cfg.vocab)) < 0.15 * math.log(cfg.vocab)


def test_level_one_loss_ignores_later_levels_bitwise():
    cfg = two_level_cfg()
    params = make_model(cfg, seed=3)
    s = sample_4_2_2(seed=4)
    _, bd = hierarchical_loss(params, [s], cfg)
    tampered = HierSample(query=s.query, responses=[s.responses[0], (s.responses[1] + 3) % cfg.vocab])
    _, bd2 = hierarchical_loss(params, [tampered], cfg)
    assert bd.per_level[0] == bd2.per_level[0]
    assert bd.per_level[1] != bd2.per_level[1]


def test_depth_mismatch_is_a_data_error():
    cfg = two_level_cfg()
    params = make_model(cfg, seed=5)
    flat_sample = HierSample(query=np.array([1, 2]), responses=[np.array([3])])
    with pytest.raises(DataError):
        hierarchical_loss(params, [flat_sample], cfg)


def test_detach_cuts_cross_segment_gradients():
    cfg = two_level_cfg()
    params = make_model(cfg, seed=6)
    s = sample_4_2_2(seed=7)

    def grads_for(detach):
        with Tape() as tape:
            loss, _ = hierarchical_loss(params, [s], cfg, detach_segments=detach)
        return backward(tape, loss)

    g_detached = grads_for(True)
    g_full = grads_for(False)
    wq0 = params.layers[0].wq
    # detached: layer 0 sees only the level-1 objective; attached: level 2 too
    assert not np.array_equal(g_detached[wq0], g_full[wq0])

    # the detached gradient must coincide with a level-1-only objective
    st = build_segment_stream(s, 1)
    with Tape() as tape:
        hidden = segment_forward(st, params, cfg.segment_ranges()[0], cfg)
        l1_only = level_loss(1, hidden, st.loss_rows, st.loss_targets, params)
    g_l1 = backward(tape, l1_only)
    np.testing.assert_array_equal(g_detached[wq0], g_l1[wq0])


def test_flat_equals_hier_at_depth_one():
    cfg = tiny_cfg(depth=1)
    params = make_model(cfg, seed=8)
    s = HierSample(query=np.array([1, 2, 3]), responses=[np.array([4, 5])])
    t_hier, _ = hierarchical_loss(params, [s], cfg, mode="hier")
    t_flat, _ = hierarchical_loss(params, [s], cfg, mode="flat")
    assert t_hier.item() == t_flat.item()


def test_flat_breakdown_reports_token_weighted_total():
    cfg = two_level_cfg()
    params = make_model(cfg, seed=9)
    s = sample_4_2_2(seed=10)
    total, bd = hierarchical_loss(params, [s], cfg, mode="flat")
    # equal token counts per level here, so total is the plain mean
    assert abs(bd.total - np.mean(bd.per_level)) < 1e-12


# ---------------------------------------------------------------------------
# optimizer and steps
# ---------------------------------------------------------------------------

def test_adamw_no_grads_means_no_motion():
    cfg = tiny_cfg()
    params = make_model(cfg, seed=11)
    opt = OptimizerState.create(params)
    new_params, new_opt = adamw_update(params, {}, opt, 0.1, TrainConfig())
    for (_, a), (_, b) in zip(params.named(), new_params.named()):
        assert a is b
    assert new_opt.step == 1


def test_zero_lr_step_leaves_params_bitwise():
    cfg = two_level_cfg()
    params = make_model(cfg, seed=12)
    tcfg = TrainConfig(lr=0.0, total_steps=10, warmup_frac=0.0, batch_size=2)
    batch = [sample_4_2_2(seed=i) for i in range(2)]
    new_params, _, _ = train_step(params, batch, OptimizerState.create(params), tcfg, cfg)
    for (_, a), (_, b) in zip(params.named(), new_params.named()):
        assert (a.data == b.data).all()


def test_divergence_raises_with_diagnostics():
    cfg = two_level_cfg()
    params = make_model(cfg, seed=13)
    params.embed.data[0, 0] = np.nan
    with pytest.raises(DivergenceError):
        train_step(
            params, [sample_4_2_2(seed=1)], OptimizerState.create(params),
            TrainConfig(total_steps=5), cfg,
        )


def test_single_sample_overfit_drives_loss_down():
    cfg = two_level_cfg(hidden=16, vocab=12)
    params = make_model(cfg, seed=14)
    s = sample_4_2_2(vocab=12, seed=15)
    tcfg = TrainConfig(lr=3e-3, total_steps=200, batch_size=1, warmup_frac=0.03)
    params, _, history = train_loop(params, [s], tcfg, cfg, seed=0)
    assert history[-1].total < 0.05
    assert history[-1].total < history[0].total


def test_nonuniform_level_weights_still_learn():
    cfg = two_level_cfg(hidden=16, vocab=12, loss_weights=(3.0,))
    params = make_model(cfg, seed=16)
    s = sample_4_2_2(vocab=12, seed=17)
    tcfg = TrainConfig(lr=3e-3, total_steps=150, batch_size=1)
    params, _, history = train_loop(params, [s], tcfg, cfg, seed=0)
    assert history[-1].total < 0.3 * history[0].total


def test_train_loop_is_deterministic():
    cfg = two_level_cfg(hidden=16, vocab=12)
    samples = [sample_4_2_2(vocab=12, seed=i) for i in range(6)]
    tcfg = TrainConfig(lr=1e-3, total_steps=12, batch_size=4)

    def run():
        params = make_model(cfg, seed=18)
        params, _, history = train_loop(params, samples, tcfg, cfg, seed=5)
        return params, history

    p1, h1 = run()
    p2, h2 = run()
    for (_, a), (_, b) in zip(p1.named(), p2.named()):
        assert (a.data == b.data).all()
    assert [b.total for b in h1] == [b.total for b in h2]
    assert h1[0].lr == cosine_schedule(0, 12, 1e-3)
