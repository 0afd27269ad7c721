import numpy as np
import pytest

from cfrnet.cfr import (
    CfrConfig,
    CfrParams,
    CfrTrace,
    ConcatConvParams,
    baseline_fuse,
    final_fusion,
    fuse_step,
    predict_masks,
    refine_step,
    run_cycle,
)
from cfrnet.errors import ConfigError, ContractError
from cfrnet.gradcheck import finite_diff_check
from cfrnet.io import load_checkpoint, save_checkpoint

from conftest import t64


def params64(c=3, seed=0, shared=True):
    p = CfrParams(c, np.random.default_rng(seed), shared_stats=shared, dtype=np.float64)
    # non-trivial BN state so eval mode is not the identity
    rng = np.random.default_rng(seed + 100)
    p.bn_weight.data[:] = rng.uniform(0.5, 1.5, c)
    p.bn_bias.data[:] = rng.standard_normal(c) * 0.1
    return p


def features(rng, n=2, c=3, h=5, w=4):
    return t64(rng.standard_normal((n, c, h, w))), t64(rng.standard_normal((n, c, h, w)))


# ---------------------------------------------------------------------------
# reference pipeline written straight from the definition


def ref_conv3x3(x, w):
    n, _, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, w.shape[0], h, wd))
    for i in range(h):
        for j in range(wd):
            patch = xp[:, :, i:i + 3, j:j + 3]
            out[:, :, i, j] = np.einsum("nckl,ockl->no", patch, w)
    return out


def ref_fuse_eval(f_t, f_v, p, stats):
    x = np.concatenate([f_t, f_v], axis=1)
    y = ref_conv3x3(x, p.fuse_weight.data)
    mean = stats.running_mean[None, :, None, None]
    var = stats.running_var[None, :, None, None]
    return (y - mean) / np.sqrt(var + p.bn_eps) * p.bn_weight.data[None, :, None, None] \
        + p.bn_bias.data[None, :, None, None]


def ref_head(f, w, b):
    return np.einsum("nchw,c->nhw", f, w[0, :, 0, 0])[:, None] + b[0]


def test_fuse_step_matches_reference_in_eval(rng):
    p = params64()
    stats = p.stats_for(1)
    stats.running_mean[:] = rng.standard_normal(3)
    stats.running_var[:] = rng.uniform(0.5, 2.0, 3)
    f_t, f_v = features(rng)
    got = fuse_step(f_t, f_v, p, training=False).data
    np.testing.assert_allclose(got, ref_fuse_eval(f_t.data, f_v.data, p, stats), atol=1e-6)


def test_fuse_step_shape_and_zero_kernel(rng):
    p = params64()
    f_t, f_v = features(rng)
    assert fuse_step(f_t, f_v, p, training=True).shape == f_t.shape
    p.fuse_weight.data[:] = 0
    p.bn_bias.data[:] = 0
    assert np.all(fuse_step(f_t, f_v, p, training=True).data == 0)
    fresh = params64(seed=5)
    fresh.fuse_weight.data[:] = 0
    fresh.bn_bias.data[:] = 0
    assert np.all(fuse_step(f_t, f_v, fresh, training=False).data == 0)


def test_fuse_step_channel_mismatch(rng):
    p = params64(c=3)
    with pytest.raises(ContractError):
        fuse_step(t64(np.zeros((1, 2, 4, 4))), t64(np.zeros((1, 2, 4, 4))), p, training=True)
    with pytest.raises(ContractError):
        fuse_step(t64(np.zeros((1, 3, 4, 4))), t64(np.zeros((1, 3, 4, 5))), p, training=True)


def test_refine_step_identities(rng):
    f = t64(np.abs(rng.standard_normal((1, 2, 3, 3))))
    np.testing.assert_array_equal(refine_step(f, t64(np.zeros(f.shape))).data, f.data)
    g = t64(rng.standard_normal((1, 2, 3, 3)))
    neg = t64(-g.data)
    assert np.all(refine_step(g, neg).data == 0)


def test_refine_step_gradient(rng):
    a = t64(rng.standard_normal((1, 2, 3, 3)))
    b = t64(rng.standard_normal((1, 2, 3, 3)))
    assert finite_diff_check(refine_step, [a, b]).passed


def test_predict_masks_matches_dot_product(rng):
    p = params64()
    f_t, f_v = features(rng)
    p.seg_t_bias.data[:] = 0.3
    m_t, m_v = predict_masks(f_t, f_v, p)
    assert m_t.shape == (2, 1, 5, 4)
    np.testing.assert_allclose(m_t.data, ref_head(f_t.data, p.seg_t_weight.data, p.seg_t_bias.data), atol=1e-6)
    np.testing.assert_allclose(m_v.data, ref_head(f_v.data, p.seg_v_weight.data, p.seg_v_bias.data), atol=1e-6)


def test_predict_masks_zero_weights_give_bias(rng):
    p = params64()
    p.seg_t_weight.data[:] = 0
    p.seg_t_bias.data[:] = -1.25
    m_t, _ = predict_masks(*features(rng), p)
    assert np.all(m_t.data == -1.25)


# ---------------------------------------------------------------------------
# the cycle


def test_run_cycle_lengths(rng):
    p = params64()
    for loops in (1, 3):
        trace = run_cycle(*features(rng), CfrConfig(3, loops), p, training=True)
        assert len(trace) == loops
        for seq in (trace.f_t, trace.f_v, trace.f_f, trace.mask_logits_t, trace.mask_logits_v):
            assert len(seq) == loops
        assert all(t.shape[0] == 2 and t.shape[2:] == (5, 4) for t in trace.f_t + trace.mask_logits_v)


def test_run_cycle_rejects_zero_loops(rng):
    with pytest.raises(ContractError):
        run_cycle(*features(rng), CfrConfig(3, 0), params64(), training=True)
    with pytest.raises(ContractError):
        CfrConfig(3, 9)


@pytest.mark.parametrize("training", [True, False])
def test_replay_oracle(rng, training):
    p = params64()
    f_t0, f_v0 = features(rng)
    trace = run_cycle(f_t0, f_v0, CfrConfig(3, 3), p, training=training)
    prev_t, prev_v = f_t0.data, f_v0.data
    for i in range(3):
        ff = trace.f_f[i].data
        np.testing.assert_array_equal(trace.f_t[i].data, np.maximum(prev_t + ff, 0))
        np.testing.assert_array_equal(trace.f_v[i].data, np.maximum(prev_v + ff, 0))
        prev_t, prev_v = trace.f_t[i].data, trace.f_v[i].data


def test_eval_prefix_property(rng):
    p = params64(shared=False)
    for i in range(1, 5):
        s = p.stats_for(i)
        s.running_mean[:] = rng.standard_normal(3) * 0.1
        s.running_var[:] = rng.uniform(0.5, 1.5, 3)
    f_t0, f_v0 = features(rng)
    full = run_cycle(f_t0, f_v0, CfrConfig(3, 4, bn_stats_shared_across_loops=False), p, training=False)
    for k in range(1, 5):
        short = run_cycle(f_t0, f_v0, CfrConfig(3, k, bn_stats_shared_across_loops=False), p, training=False)
        cut = full.truncated(k)
        for a, b in zip(cut.f_t + cut.f_v + cut.mask_logits_t, short.f_t + short.f_v + short.mask_logits_t):
            np.testing.assert_array_equal(a.data, b.data)


def test_trace_is_finite(rng):
    trace = run_cycle(*features(rng), CfrConfig(3, 4), params64(), training=True)
    assert all(np.all(np.isfinite(t.data)) for t in trace.f_t + trace.f_v + trace.f_f)


@pytest.mark.parametrize("loops", [1, 2, 3, 4, 8])
def test_param_count_independent_of_loops(loops):
    base = CfrParams.from_config(CfrConfig(16, 1), np.random.default_rng(0)).num_parameters()
    p = CfrParams.from_config(CfrConfig(16, loops), np.random.default_rng(0))
    assert p.num_parameters() == base == 16 * 32 * 9 + 2 * 16 + 2 * (16 + 1)


def test_per_loop_stats_only_add_buffers(rng):
    p = params64(shared=False)
    run_cycle(*features(rng), CfrConfig(3, 3, bn_stats_shared_across_loops=False), p, training=True)
    names = set(p.state_dict())
    assert {"cfr.bn.running_mean.1", "cfr.bn.running_var.3"} <= names
    assert p.num_parameters() == params64(shared=True).num_parameters()


def test_shared_stats_updated_every_loop(rng):
    p = params64()
    run_cycle(*features(rng), CfrConfig(3, 3), p, training=True)
    # three momentum-0.1 updates from var 1 cannot leave the running var at 1
    assert not np.allclose(p.stats_for(1).running_var, 1.0)
    assert p.stats_for(1) is p.stats_for(3)


def test_end_to_end_gradient_tiny(rng):
    p = params64(c=2)
    f_t0 = t64(rng.standard_normal((1, 2, 4, 4)))
    f_v0 = t64(rng.standard_normal((1, 2, 4, 4)))

    def fn(f_t, f_v, *_):
        return final_fusion(run_cycle(f_t, f_v, CfrConfig(2, 3), p, training=True))

    rep = finite_diff_check(fn, [f_t0, f_v0] + p.parameters())
    assert rep.passed, rep


def test_state_dict_checkpoint_names(tmp_path):
    p = CfrParams(4, np.random.default_rng(1))
    p.stats_for(1)
    save_checkpoint(tmp_path / "c.cfrt", p.state_dict())
    loaded = load_checkpoint(tmp_path / "c.cfrt")
    assert all(k.startswith(("cfr.fuse_weight", "cfr.bn.", "cfr.seg_t.", "cfr.seg_v.")) for k in loaded)
    q = CfrParams(4, np.random.default_rng(2))
    q.load_state_dict(loaded)
    for a, b in zip(p.parameters(), q.parameters()):
        np.testing.assert_array_equal(a.data, b.data)


# ---------------------------------------------------------------------------
# final fusion


def random_trace(rng, loops, shape=(2, 3, 4, 4)):
    tr = CfrTrace()
    for _ in range(loops):
        tr.f_t.append(t64(rng.standard_normal(shape)))
        tr.f_v.append(t64(rng.standard_normal(shape)))
    return tr


def brute_force_fusion(trace):
    total = np.zeros(trace.f_t[0].shape)
    for f in trace.f_t:
        total = total + f.data
    for f in trace.f_v:
        total = total + f.data
    return total / (2 * len(trace.f_t))


def test_final_fusion_single_loop(rng):
    tr = random_trace(rng, 1)
    np.testing.assert_allclose(final_fusion(tr).data, (tr.f_t[0].data + tr.f_v[0].data) / 2, atol=1e-15)


def test_final_fusion_of_equal_maps(rng):
    x = rng.standard_normal((1, 2, 3, 3))
    tr = CfrTrace(f_t=[t64(x)] * 3, f_v=[t64(x)] * 3)
    np.testing.assert_allclose(final_fusion(tr).data, x, atol=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_final_fusion_brute_force_and_symmetry(seed):
    rng = np.random.default_rng(seed)
    tr = random_trace(rng, int(rng.integers(1, 6)))
    got = final_fusion(tr).data
    assert np.max(np.abs(got - brute_force_fusion(tr))) < 1e-12
    swapped = CfrTrace(f_t=tr.f_v, f_v=tr.f_t)
    assert np.max(np.abs(final_fusion(swapped).data - got)) < 1e-12


def test_final_fusion_empty_trace():
    with pytest.raises(ContractError):
        final_fusion(CfrTrace())


# ---------------------------------------------------------------------------
# baselines


def test_baseline_average_and_max(rng):
    x = t64(rng.standard_normal((1, 2, 3, 3)))
    np.testing.assert_array_equal(baseline_fuse(x, x, "average").data, x.data)
    a = t64(np.array([1.0, -2.0]).reshape(1, 2, 1, 1))
    b = t64(np.array([0.0, 5.0]).reshape(1, 2, 1, 1))
    assert baseline_fuse(a, b, "max").data.reshape(-1).tolist() == [1.0, 5.0]


def test_concat_conv_selecting_first_half_returns_thermal(rng):
    c = 3
    proj = ConcatConvParams(c, rng, dtype=np.float64)
    proj.weight.data[:] = 0
    proj.weight.data[np.arange(c), np.arange(c), 0, 0] = 1.0
    f_t, f_v = features(rng, c=c)
    np.testing.assert_allclose(baseline_fuse(f_t, f_v, "concat_conv", proj).data, f_t.data, atol=1e-12)


def test_unknown_baseline_is_config_error(rng):
    x = t64(np.zeros((1, 1, 2, 2)))
    with pytest.raises(ConfigError):
        baseline_fuse(x, x, "median")
