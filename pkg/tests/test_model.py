import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import GRAD_CFG
from ranfm.model import (VARIANTS, Model, ModelConfig, NormStats, ParameterSet, TokenSequence, apply_mask,
                         attention, encoder_forward, encoder_layer_count, head_classify,
                         head_reconstruct, init_head, init_params, mean_pool, param_count, param_shapes,
                         patchify, positional_encode, project_patches, revin_denormalize, revin_normalize,
                         sinusoidal_table)
from ranfm.numerics import DimensionError, Tensor, gradient_check, no_grad, precision
from ranfm.training import masked_mse, token_mask_to_samples

GOLDEN_CFG = ModelConfig(n_layers=1, d_model=4, n_heads=2, d_ff=8, window=8, patch_len=2, head_depth=1,
                         variant="custom")
# encoder output for GOLDEN_CFG, seed 7, input sin(0.7 t) reshaped to (2, 8), 64-bit
GOLDEN_Z = np.array([
    [-1.1815452467, 1.0395703521, -0.7988282708, 0.9408031653],
    [-1.1066228447, 1.2951189101, -0.8291899704, 0.6406939051],
    [0.9590452167, -1.5860235054, -0.1155669179, 0.7425452065],
    [0.2056534353, -1.6604534318, 0.4605965143, 0.9942034822],
    [-1.2275926336, 0.6262244122, -0.6791178741, 1.2804860955],
    [-1.0739502628, 1.1816470145, -0.9037115807, 0.796014829],
    [-1.3599870423, 0.9126363764, -0.5565313044, 1.0038819703],
    [0.4287636717, -1.7223414818, 0.5661070219, 0.7274707882],
])


def t64(x):
    return Tensor(np.asarray(x, dtype=np.float64), dtype=np.float64)


# -- config ----------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(window=4, patch_len=8)
    with pytest.raises(ValueError):
        ModelConfig(head_depth=0)
    assert ModelConfig().n_patches == 64


def test_variants():
    small, base, large = (ModelConfig.from_variant(v) for v in ("small", "base", "large"))
    assert (small.n_layers, small.d_model, small.n_heads, small.d_ff) == (6, 512, 8, 2048)
    assert (base.n_layers, base.d_model, base.n_heads, base.d_ff) == (12, 768, 12, 3072)
    assert (large.n_layers, large.d_model, large.n_heads, large.d_ff) == (24, 1024, 16, 4096)
    assert base.window == 512 and base.patch_len == 8 and base.head_depth == 2
    assert set(VARIANTS) == {"small", "base", "large"}


# -- RevIN -----------------------------------------------------------------

def test_revin_closed_form():
    x, stats = revin_normalize(np.array([[1.0, 2.0, 3.0, 4.0]]))
    np.testing.assert_allclose(x, [[-1.3416407865, -0.4472135955, 0.4472135955, 1.3416407865]], atol=1e-9)
    assert stats.mean[0] == 2.5 and stats.std[0] == pytest.approx(math.sqrt(1.25))
    out = revin_denormalize(np.array([[1.0]]), stats)
    assert out[0, 0] == pytest.approx(2.5 + math.sqrt(1.25))
    assert out[0, 0] == pytest.approx(3.6180, abs=1e-4)


def test_revin_constant_and_standard_channels():
    x, stats = revin_normalize(np.array([[5.0, 5.0, 5.0, 5.0]]), eps=1e-5)
    assert not x.any() and stats.std[0] == 1e-5 and stats.mean[0] == 5.0
    z = np.array([[-1.0, 1.0, -1.0, 1.0]])
    np.testing.assert_allclose(revin_normalize(z)[0], z, atol=1e-6)


def test_revin_errors():
    with pytest.raises(ValueError):
        revin_normalize(np.array([[1.0, np.nan]]))
    stats = NormStats(np.zeros(2), np.ones(2))
    with pytest.raises(DimensionError):
        revin_denormalize(np.zeros((3, 4)), stats)


def test_revin_zero_output_is_mean():
    x = np.array([[1.0, 4.0, 2.0], [10.0, 0.0, -3.0]])
    _, stats = revin_normalize(x)
    np.testing.assert_allclose(revin_denormalize(np.zeros((2, 5)), stats)[:, 0], x.mean(axis=1))


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 40)),
              elements=st.floats(-1e4, 1e4, allow_nan=False)))
def test_revin_round_trip(x):
    eps = 1e-5
    xn, stats = revin_normalize(x, eps)
    ok = x.std(axis=-1) > 10 * eps
    back = revin_denormalize(xn, stats)
    scale = np.maximum(1.0, np.abs(x))
    assert np.all((np.abs(back - x) / scale)[ok] < 1e-6)


# -- patching, projection, masking, positions ----------------------------------

def test_patchify_counts():
    assert patchify(np.zeros((3, 512)), 8).shape == (3, 64, 8)
    x = np.arange(8.0)[None]
    np.testing.assert_array_equal(patchify(x, 8)[0, 0], x[0])
    p = patchify(np.arange(10.0)[None], 8)
    assert p.shape == (1, 1, 8) and p[0, 0, -1] == 7.0
    with pytest.raises(ValueError):
        patchify(np.zeros((1, 4)), 8)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 50), st.integers(1, 9))
def test_patchify_reassembly_identity(C, T, P):
    if T < P:
        return
    x = np.arange(C * T, dtype=float).reshape(C, T)
    p = patchify(x, P)
    np.testing.assert_array_equal(p.reshape(C, -1), x[:, : (T // P) * P])


def test_projection_hand_value():
    seq = project_patches(np.ones((1, 1, 2)), t64([[1.0, 0.0], [1.0, 0.0]]), t64([0.0, 0.0]))
    np.testing.assert_array_equal(seq.embeddings.data, [[2.0, 0.0]])
    zero = project_patches(np.zeros((2, 3, 2)), t64(np.ones((2, 4))), t64([1.0, 2.0, 3.0, 4.0]))
    np.testing.assert_array_equal(zero.embeddings.data, np.tile([1.0, 2.0, 3.0, 4.0], (6, 1)))
    ident = project_patches(np.arange(6.0).reshape(1, 2, 3), t64(np.eye(3)), t64(np.zeros(3)))
    np.testing.assert_array_equal(ident.embeddings.data, np.arange(6.0).reshape(2, 3))


def test_token_layout_channel_major():
    seq = project_patches(np.zeros((3, 4, 2)), t64(np.ones((2, 2))), t64(np.zeros(2)))
    assert seq.channel_of.tolist() == [0] * 4 + [1] * 4 + [2] * 4
    assert seq.patch_of.tolist() == [0, 1, 2, 3] * 3
    pairs = set(zip(seq.channel_of.tolist(), seq.patch_of.tolist()))
    assert len(pairs) == seq.n_tokens == 12


def test_apply_mask():
    seq = TokenSequence(t64(np.arange(12.0).reshape(6, 2)), 2, 3)
    token = t64([-1.0, -2.0])
    same = apply_mask(seq, [], token)
    np.testing.assert_array_equal(same.embeddings.data, seq.embeddings.data)
    assert not same.masked.any()
    allm = apply_mask(seq, range(6), token)
    np.testing.assert_array_equal(allm.embeddings.data, np.tile([-1.0, -2.0], (6, 1)))
    one = apply_mask(seq, [3], token)
    changed = np.flatnonzero((one.embeddings.data != seq.embeddings.data).any(axis=1))
    assert changed.tolist() == [3] and np.flatnonzero(one.masked).tolist() == [3]
    with pytest.raises(IndexError):
        apply_mask(seq, [6], token)


def test_positional_table():
    pe = sinusoidal_table(3, 4)
    np.testing.assert_array_equal(pe[0], [0.0, 1.0, 0.0, 1.0])
    np.testing.assert_allclose(pe[1], [0.8415, 0.5403, 0.0100, 0.99995], atol=1e-4)
    assert np.all(np.abs(sinusoidal_table(200, 16)) <= 1.0)
    with pytest.raises(ValueError):
        sinusoidal_table(3, 5)


def test_positions_shared_across_channels():
    seq = positional_encode(TokenSequence(t64(np.zeros((6, 4))), 2, 3))
    z = seq.embeddings.data
    np.testing.assert_array_equal(z[:3], z[3:])
    np.testing.assert_allclose(z[:3], sinusoidal_table(3, 4))


# -- attention and encoder ----------------------------------------------------

def test_attention_examples():
    v = t64(np.array([[1.0, 2.0], [3.0, 6.0], [5.0, 1.0]]))
    out = attention(t64(np.zeros((3, 2))), t64(np.ones((3, 2))), v).data
    np.testing.assert_allclose(out, np.tile(v.data.mean(axis=0), (3, 1)))
    single = t64([[0.3, -0.2]])
    np.testing.assert_allclose(attention(single, single, t64([[4.0, 5.0]])).data, [[4.0, 5.0]])
    eye = t64(np.eye(2))
    row = attention(eye, eye, eye).data[0]
    np.testing.assert_allclose(row, [0.6698, 0.3302], atol=1e-4)
    w = np.exp(1 / math.sqrt(2))
    np.testing.assert_allclose(row, [w / (w + 1), 1 / (w + 1)], atol=1e-12)


def test_attention_chunked_matches_dense(rng):
    from ranfm import model as model_mod
    q, k, v = (rng.standard_normal((2, 37, 8)) for _ in range(3))
    dense = attention(t64(q), t64(k), t64(v)).data
    chunked = model_mod._attention_chunked(q, k, v, 1 / math.sqrt(8))
    np.testing.assert_allclose(chunked, dense, atol=1e-12)


def test_attention_shape_error():
    with pytest.raises(DimensionError):
        attention(t64(np.ones((2, 3))), t64(np.ones((3, 3))), t64(np.ones((3, 3))))


def _reference_encoder(x, params, cfg):
    """Independent plain-numpy encoder used as an oracle."""
    P = {k: v.data.astype(np.float64) for k, v in params.items()}

    def ln(h, g, b):
        mu = h.mean(-1, keepdims=True)
        var = ((h - mu) ** 2).mean(-1, keepdims=True)
        return (h - mu) / np.sqrt(var + cfg.norm_eps) * g + b

    n, d = x.shape
    H, dh = cfg.n_heads, d // cfg.n_heads
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        h = ln(x, P[f"{p}.ln_attn.gain"], P[f"{p}.ln_attn.bias"])
        heads = []
        q = h @ P[f"{p}.attn.wq.weight"] + P[f"{p}.attn.wq.bias"]
        k = h @ P[f"{p}.attn.wk.weight"] + P[f"{p}.attn.wk.bias"]
        v = h @ P[f"{p}.attn.wv.weight"] + P[f"{p}.attn.wv.bias"]
        for j in range(H):
            sl = slice(j * dh, (j + 1) * dh)
            s = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
            a = np.exp(s - s.max(1, keepdims=True))
            a /= a.sum(1, keepdims=True)
            heads.append(a @ v[:, sl])
        x = x + np.concatenate(heads, 1) @ P[f"{p}.attn.wo.weight"] + P[f"{p}.attn.wo.bias"]
        h = ln(x, P[f"{p}.ln_ffn.gain"], P[f"{p}.ln_ffn.bias"])
        h = np.maximum(h @ P[f"{p}.ffn.up.weight"] + P[f"{p}.ffn.up.bias"], 0)
        x = x + h @ P[f"{p}.ffn.down.weight"] + P[f"{p}.ffn.down.bias"]
    return ln(x, P["ln_final.gain"], P["ln_final.bias"])


def _golden_input():
    return revin_normalize(np.sin(0.7 * np.arange(16.0)).reshape(2, 8))[0]


def test_encoder_golden_tensor():
    with precision(64), no_grad():
        z = Model.init(GOLDEN_CFG, seed=7).encode(_golden_input()).embeddings.data
    np.testing.assert_allclose(z, GOLDEN_Z, atol=1e-9)


@pytest.mark.parametrize("seed", range(3))
def test_encoder_matches_reference(seed):
    cfg = ModelConfig(n_layers=2, d_model=8, n_heads=2, d_ff=16, window=16, patch_len=4, variant="custom")
    with precision(64), no_grad():
        params = init_params(cfg, seed)
        r = np.random.default_rng(seed)
        for name, t in params.items():  # non-trivial biases and gains
            t.data[...] += 0.1 * r.standard_normal(t.shape)
        x = r.standard_normal((10, 8))
        out = encoder_forward(TokenSequence(t64(x), 2, 5), params, cfg).embeddings.data
    np.testing.assert_allclose(out, _reference_encoder(x, params, cfg), atol=1e-10)


def test_encoder_without_layers_is_final_norm():
    cfg = ModelConfig(n_layers=0, d_model=4, n_heads=2, d_ff=8, window=8, patch_len=2, variant="custom")
    with precision(64):
        params = init_params(cfg, 0)
        x = np.arange(8.0).reshape(2, 4) ** 2
        out = encoder_forward(TokenSequence(t64(x), 1, 2), params, cfg).embeddings.data
    mu, sd = x.mean(1, keepdims=True), np.sqrt(x.var(1, keepdims=True) + cfg.norm_eps)
    np.testing.assert_allclose(out, (x - mu) / sd)


def test_channel_swap_equivariance(rng):
    cfg = GRAD_CFG
    with precision(64), no_grad():
        params = init_params(cfg, 3)
        N = cfg.n_patches
        x = rng.standard_normal((3 * N, cfg.d_model))
        perm = np.concatenate([np.arange(N, 2 * N), np.arange(N), np.arange(2 * N, 3 * N)])
        z = encoder_forward(TokenSequence(t64(x), 3, N), params, cfg).embeddings.data
        zp = encoder_forward(TokenSequence(t64(x[perm]), 3, N), params, cfg).embeddings.data
    np.testing.assert_allclose(zp[np.argsort(perm)], z, atol=1e-12)


@pytest.mark.parametrize("variant", ["small", "base", "large"])
def test_encoder_finite_at_init(variant):
    cfg = ModelConfig.from_variant(variant, window=32, n_layers=1)
    m = Model.init(cfg, 0)
    with no_grad():
        z = m.encode(revin_normalize(np.random.default_rng(0).standard_normal((2, 32)))[0])
    assert np.all(np.isfinite(z.embeddings.data))


# -- pooling and heads ------------------------------------------------------

def test_mean_pool():
    z = TokenSequence(t64([[0.0, 2.0], [2.0, 0.0]]), 1, 2)
    np.testing.assert_array_equal(mean_pool(z).data, [1.0, 1.0])
    v = TokenSequence(t64(np.tile([3.0, -1.0], (6, 1))), 2, 3)
    np.testing.assert_allclose(mean_pool(v).data, [3.0, -1.0])
    x = np.random.default_rng(0).standard_normal((6, 2))
    a = mean_pool(TokenSequence(t64(x), 2, 3)).data
    b = mean_pool(TokenSequence(t64(x[::-1]), 2, 3)).data
    np.testing.assert_allclose(a, b, atol=1e-15)


def _zero_params(cfg):
    params = init_params(cfg, 0)
    for t in params.values():
        t.data[...] = 0.0
    return params


def test_reconstruct_shape_and_zero_weights():
    cfg = ModelConfig(n_layers=1, d_model=8, n_heads=2, d_ff=16, window=18, patch_len=4, variant="custom")
    m = Model.init(cfg, 0)
    with no_grad():
        out = m.reconstruct(np.zeros((3, 18)))
    assert out.shape == (3, 16)
    zp = _zero_params(cfg)
    z = TokenSequence(t64(np.ones((12, 8))), 3, 4)
    assert not head_reconstruct(z, zp, cfg).data.any()


def test_reconstruct_pseudo_inverse():
    # tokens are linear in their patch, so a pinv head recovers the patch exactly
    cfg = ModelConfig(n_layers=0, d_model=4, n_heads=2, d_ff=8, window=6, patch_len=2, head_depth=1,
                      variant="custom")
    r = np.random.default_rng(5)
    W = r.standard_normal((2, 4))
    patches = r.standard_normal((1, 3, 2))
    with precision(64):
        params = ParameterSet({"head.reconstruct.0.weight": t64(np.linalg.pinv(W)),
                               "head.reconstruct.0.bias": t64(np.zeros(2))})
        seq = project_patches(patches, t64(W), t64(np.zeros(4)))
        out = head_reconstruct(seq, params, cfg).data
    np.testing.assert_allclose(out.reshape(1, 3, 2), patches, atol=1e-4)


def test_forecast_head():
    cfg = ModelConfig(n_layers=1, d_model=8, n_heads=2, d_ff=16, window=16, patch_len=4, horizon=5,
                      variant="custom")
    m = Model.init(cfg, 1)
    with no_grad():
        for C in (1, 3):
            assert m.forecast(np.zeros((C, 16))).shape == (C, 5)
        same = m.forecast(revin_normalize(np.tile(np.sin(np.arange(16.0)), (2, 1)))[0]).data
    np.testing.assert_array_equal(same[0], same[1])
    zp = _zero_params(cfg)
    x = np.array([[1.0, 5.0] * 8, [2.0, 0.0] * 8])
    xn, stats = revin_normalize(x)
    with no_grad():
        pred = revin_denormalize(Model(cfg, zp).forecast(xn).data, stats)
    np.testing.assert_allclose(pred, np.repeat(x.mean(1, keepdims=True), 5, 1))
    with pytest.raises(ValueError):
        ModelConfig(horizon=0)


def test_classify_head():
    cfg = ModelConfig(n_layers=0, d_model=2, n_heads=1, d_ff=2, window=4, patch_len=2, head_depth=1,
                      n_classes=2, variant="custom")
    ident = ParameterSet({"head.classify.0.weight": t64(np.eye(2)), "head.classify.0.bias": t64(np.zeros(2))})
    logits = head_classify(t64([3.0, 1.0]), ident, cfg).data
    assert logits.tolist() == [3.0, 1.0] and int(np.argmax(logits)) == 0
    biased = ParameterSet({"head.classify.0.weight": t64(np.zeros((2, 2))),
                           "head.classify.0.bias": t64([0.5, -0.5])})
    for z in ([1.0, 2.0], [-7.0, 0.0]):
        assert head_classify(t64(z), biased, cfg).data.tolist() == [0.5, -0.5]
    assert np.argmax(logits + 17.0) == np.argmax(logits)
    with pytest.raises(ValueError):
        head_classify(t64([1.0, 1.0]), ident, cfg.replace(n_classes=None))


# -- parameters ---------------------------------------------------------------

def test_init_deterministic_and_conventions():
    cfg = GRAD_CFG
    a, b = init_params(cfg, 11), init_params(cfg, 11)
    assert a.digest() == b.digest()
    assert init_params(cfg, 12).digest() != a.digest()
    for name, t in a.items():
        if name.endswith(".gain"):
            assert np.all(t.data == 1.0)
        elif name.endswith(".bias") or name == "mask_token":
            assert not t.data.any()
        else:
            bound = math.sqrt(6.0 / sum(t.shape))
            assert np.all(np.abs(t.data) <= bound)


def test_init_weight_mean_statistics():
    cfg = ModelConfig(n_layers=1, d_model=100, n_heads=4, d_ff=8, window=8, patch_len=2, variant="custom")
    w = init_params(cfg, 0)["layers.0.attn.wq.weight"].data.astype(np.float64).ravel()
    assert w.size == 10_000
    bound = math.sqrt(6.0 / 200)
    se = bound / math.sqrt(3) / math.sqrt(w.size)
    assert abs(w.mean()) < 3 * se


def test_param_count_hand_enumeration():
    cfg = ModelConfig(n_layers=1, d_model=4, n_heads=2, d_ff=8, window=4, patch_len=2, head_depth=1,
                      variant="custom")
    # projection 2*4+4, mask 4, layer 4*(16+4) + 2*(4+4) + (32+8) + (32+4), final norm 8,
    # reconstruct 4*2+2, forecast (N*d=8)*1+1, classify 4*2+2
    assert param_count(cfg, horizon=1, n_classes=2) == 12 + 4 + 172 + 8 + 10 + 9 + 10 == 225
    full = cfg.replace(horizon=1, n_classes=2)
    assert sum(int(np.prod(s)) for s in param_shapes(full).values()) == 225
    assert init_params(full, 0).numel() == 225


def test_param_count_layerless_and_base():
    cfg = ModelConfig(n_layers=0, d_model=6, n_heads=2, d_ff=8, window=8, patch_len=4, head_depth=1,
                      variant="custom")
    assert param_count(cfg, reconstruct=False) == 4 * 6 + 6 + 6 + 12
    base = ModelConfig.from_variant("base")
    assert base.n_layers * encoder_layer_count(768, 3072) == 85_054_464


def test_init_head_replaces_only_that_head():
    cfg = GRAD_CFG.replace(horizon=4)
    params = init_params(cfg, 0)
    fresh = init_head(params, cfg, "forecast", seed=9)
    for name in params:
        same = np.array_equal(params[name].data, fresh[name].data)
        assert same == (not name.startswith("head.forecast.")) or not params[name].data.any()


def test_model_gradient_check():
    cfg = GRAD_CFG
    r = np.random.default_rng(0)
    with precision(64):
        m = Model.init(cfg, 0)
        xn = revin_normalize(r.standard_normal((2, cfg.window)))[0]
        tmask = np.zeros(2 * cfg.n_patches, bool)
        tmask[[1, 6]] = True
        smask = token_mask_to_samples(tmask, 2, cfg.n_patches, cfg.patch_len)
        params = list(m.params.values())
        err = gradient_check(lambda: masked_mse(xn, m.reconstruct(xn, tmask), smask), params)
    assert err < 1e-4
