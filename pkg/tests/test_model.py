import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gcnetomaly.model import (
    LOSS_COMPONENTS,
    ModelConfig,
    compute_loss,
    decode,
    encode,
    gcn_layer,
    init_params,
    propagation_matrix,
    reconstruct,
    train,
)

BLOCKS = {"stat": slice(0, 3), "embedding": slice(3, 6), "process": slice(6, 9), "significant": slice(9, 11)}
F = 11


def random_cm(rng, n):
    c = np.triu(rng.integers(0, 6, size=(n, n)) * (rng.random((n, n)) < 0.6), 1)
    c = c + c.T
    return c / c.max() if c.max() > 0 else c.astype(float)


def random_fm(rng, n):
    fm = rng.random((n, F))
    fm[:, 6:9] *= rng.random((n, 3)) < 0.5
    return fm


def sig(x):
    return 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x))


def gcn_oracle(cm, x, w, relu=True):
    n, f, h = len(cm), len(x[0]), len(w[0])
    a = [[cm[i][j] + (1.0 if i == j else 0.0) for j in range(n)] for i in range(n)]
    deg = [sum(a[i]) for i in range(n)]
    a_hat = [[a[i][j] / math.sqrt(deg[i] * deg[j]) for j in range(n)] for i in range(n)]
    ax = [[sum(a_hat[i][k] * x[k][c] for k in range(n)) for c in range(f)] for i in range(n)]
    out = [[sum(ax[i][c] * w[c][o] for c in range(f)) for o in range(h)] for i in range(n)]
    if relu:
        out = [[max(v, 0.0) for v in row] for row in out]
    return out


def dense_sigmoid(x, w, b):
    return [[sig(sum(x[i][k] * w[k][j] for k in range(len(w))) + b[0][j]) for j in range(len(w[0]))]
            for i in range(len(x))]


def decode_oracle(z_act, p):
    n = len(z_act)
    s = [[sig(sum(z_act[i][k] * z_act[j][k] for k in range(len(z_act[0])))) for j in range(n)] for i in range(n)]
    tl = {k: v.tolist() for k, v in p.items()}
    feat = dense_sigmoid(s, tl["W_feat_head_1"], tl["b_feat_head_1"])
    fm_hat = dense_sigmoid(feat, tl["W_feat_head_2"], tl["b_feat_head_2"])
    adj = dense_sigmoid(s, tl["W_adj_head_1"], tl["b_adj_head_1"])
    cm_hat = dense_sigmoid(adj, tl["W_adj_head_2"], tl["b_adj_head_2"])
    return cm_hat, fm_hat


def loss_oracle(cm, fm, cm_hat, fm_hat, weights, zero_weight=0.1):
    alpha, beta, gamma, delta = weights
    rows = []
    for i in range(len(cm)):
        am = sum(abs(cm[i][j] - cm_hat[i][j]) for j in range(len(cm))) / len(cm)

        def mae(lo, hi):
            return sum(abs(fm[i][j] - fm_hat[i][j]) for j in range(lo, hi)) / (hi - lo)

        def mse(lo, hi, zero_w=1.0):
            tot = 0.0
            for j in range(lo, hi):
                w = zero_w if fm[i][j] == 0.0 else 1.0
                tot += w * (fm[i][j] - fm_hat[i][j]) ** 2
            return tot / (hi - lo)

        sf, emb, po, pf = mae(0, 3), mae(3, 6), mse(6, 9, zero_weight), mse(9, 11)
        rows.append((am, sf, emb, po, pf, am + alpha * sf + beta * emb + gamma * po + delta * pf))
    return rows


def test_gcn_layer_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    for case in range(120):
        n, f, h = int(rng.integers(1, 7)), int(rng.integers(1, 6)), int(rng.integers(1, 5))
        cm, x, w = random_cm(rng, n), rng.normal(size=(n, f)), rng.normal(size=(f, h))
        relu = case % 2 == 0
        got = gcn_layer(cm, x, w, activation="relu" if relu else "linear").value
        want = np.array(gcn_oracle(cm.tolist(), x.tolist(), w.tolist(), relu))
        assert np.max(np.abs(got - want)) <= 1e-12


def test_gcn_layer_trivial_cases():
    rng = np.random.default_rng(1)
    x, w = rng.normal(size=(4, 3)), rng.normal(size=(3, 2))
    assert np.allclose(propagation_matrix(np.zeros((4, 4))), np.eye(4))
    assert np.allclose(gcn_layer(np.zeros((4, 4)), x, w).value, np.maximum(x @ w, 0), atol=1e-15)
    assert not gcn_layer(random_cm(rng, 4), np.zeros((4, 3)), w).value.any()


def test_decode_matches_scalar_oracle():
    rng = np.random.default_rng(2)
    config = ModelConfig(gcn_filters=5, latent_dim=3)
    for _ in range(100):
        n = int(rng.integers(1, 7))
        params = init_params(n, F, config, rng)
        for k in params:
            if k.startswith("b_"):
                params[k] = rng.normal(size=params[k].shape)
        z_act = rng.random((n, 3))
        cm_hat, fm_hat = decode(z_act, params)
        want_cm, want_fm = decode_oracle(z_act.tolist(), params)
        assert np.max(np.abs(cm_hat.value - np.array(want_cm))) <= 1e-12
        assert np.max(np.abs(fm_hat.value - np.array(want_fm))) <= 1e-12


def test_loss_matches_scalar_oracle():
    rng = np.random.default_rng(3)
    config = ModelConfig()
    for _ in range(150):
        n = int(rng.integers(1, 7))
        cm, fm = random_cm(rng, n), random_fm(rng, n)
        cm_hat, fm_hat = rng.random((n, n)), rng.random((n, F))
        b = compute_loss(cm, fm, BLOCKS, cm_hat, fm_hat, config)
        want = np.array(loss_oracle(cm.tolist(), fm.tolist(), cm_hat.tolist(), fm_hat.tolist(), (0.3, 0.3, 0.2, 0.2)))
        got = np.column_stack([b.AM, b.SF, b.EMB, b.PO, b.PF, b.RE])
        assert np.max(np.abs(got - want)) <= 1e-12
        assert abs(b.total - want[:, 5].mean()) <= 1e-12


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1), st.lists(st.floats(0, 1), min_size=4, max_size=4), st.sampled_from(["SF", "PF"]))
def test_re_decomposition_identity(seed, raw, binds):
    rng = np.random.default_rng(seed)
    total = sum(raw)
    weights = tuple(r / total for r in raw) if total > 0 else (1.0, 0.0, 0.0, 0.0)
    weights = weights[:3] + (1.0 - sum(weights[:3]),)
    if weights[3] < 0:
        return
    config = ModelConfig(loss_weights=weights, alpha_binds=binds)
    n = int(rng.integers(1, 7))
    b = compute_loss(random_cm(rng, n), random_fm(rng, n), BLOCKS, rng.random((n, n)), rng.random((n, F)), config)
    first = b.SF if binds == "SF" else b.PF
    a, be, g, d = config.loss_weights
    assert np.max(np.abs(b.RE - (b.AM + a * first + be * b.EMB + g * b.PO + d * b.PF))) <= 1e-12
    for c in LOSS_COMPONENTS:
        assert (getattr(b, c) >= 0).all()


def test_perfect_reconstruction_and_degenerate_weights():
    rng = np.random.default_rng(4)
    cm, fm = random_cm(rng, 5), random_fm(rng, 5)
    zero = compute_loss(cm, fm, BLOCKS, cm, fm, ModelConfig())
    assert not zero.RE.any() and zero.total == 0.0
    cm_hat, fm_hat = rng.random((5, 5)), rng.random((5, F))
    b = compute_loss(cm, fm, BLOCKS, cm_hat, fm_hat, ModelConfig(loss_weights=(1.0, 0.0, 0.0, 0.0)))
    assert np.array_equal(b.RE, b.AM + b.SF)


@pytest.mark.parametrize("weights", [(0.3, 0.3, 0.2, 0.3), (0.5, 0.5, 0.1, -0.1), (0.25, 0.25, 0.25, 0.25 + 2e-9)])
def test_weights_must_sum_to_one(weights):
    with pytest.raises(ValueError):
        ModelConfig(loss_weights=weights)


def test_weight_sum_tolerance():
    ModelConfig(loss_weights=(0.4, 0.2, 0.2, 0.2 + 5e-10))


def test_ablation_configs():
    base = ModelConfig()
    assert base.with_ablation("ae").variational is False
    assert base.with_ablation("no-embedding").use_embedding_block is False
    assert base.with_ablation("vae") == base
    with pytest.raises(ValueError):
        base.with_ablation("gan")


def _encode_inputs(seed, n=6, dropout=0.5):
    rng = np.random.default_rng(seed)
    config = ModelConfig(gcn_filters=6, latent_dim=4, dropout_rate=dropout)
    cm, fm = random_cm(rng, n), random_fm(rng, n)
    return config, cm, fm, init_params(n, F, config, rng)


def test_encode_ae_uses_mean_and_is_deterministic():
    config, cm, fm, params = _encode_inputs(5)
    ae = ModelConfig(**{**config.__dict__, "variational": False})
    z_mean, _, z, _ = encode(cm, fm, params, ae, rng=3, training=True)
    assert np.array_equal(z.value, z_mean.value)
    a = encode(cm, fm, params, config, rng=3, training=True)[2].value
    b = encode(cm, fm, params, config, rng=3, training=True)[2].value
    assert np.array_equal(a, b)


def test_vae_and_ae_agree_as_std_vanishes():
    config, cm, fm, params = _encode_inputs(6, dropout=0.0)
    params["W_gcn_std"] = -1e3 * np.ones_like(params["W_gcn_std"])
    z_mean, _, z, _ = encode(cm, fm + 0.1, params, config, rng=1, training=True)
    assert np.max(np.abs(z.value - z_mean.value)) < 1e-6
    ae = ModelConfig(**{**config.__dict__, "variational": False})
    z_ae = encode(cm, fm + 0.1, params, ae, rng=1, training=True)[2]
    assert np.max(np.abs(z.value - z_ae.value)) < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_decoder_range_and_symmetry(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 8))
    config = ModelConfig(gcn_filters=4, latent_dim=3)
    params = init_params(n, F, config, rng)
    scale = rng.choice([1.0, 10.0])
    for k in params:
        params[k] = params[k] * scale
    z_act = rng.random((n, 3))
    cm_hat, fm_hat = decode(z_act, params)
    from gcnetomaly import autodiff as ad

    s = ad.sigmoid(ad.matmul(z_act, ad.transpose(z_act))).value
    assert np.array_equal(s, s.T)
    assert ((s > 0) & (s < 1)).all()
    for out in (cm_hat.value, fm_hat.value):
        assert ((out >= 0) & (out <= 1)).all() and np.isfinite(out).all()
    if scale == 1.0:
        # saturation to exactly 0 or 1 needs large pre-activations
        assert ((cm_hat.value > 0) & (cm_hat.value < 1)).all()


def clique_pair():
    c = np.zeros((10, 10))
    for lo in (0, 5):
        c[lo:lo + 5, lo:lo + 5] = 1
    np.fill_diagonal(c, 0)
    rng = np.random.default_rng(8)
    return c, random_fm(rng, 10)


def test_training_reduces_loss_and_is_deterministic():
    cm, fm = clique_pair()
    config = ModelConfig(epochs=60, seed=3)
    params, curve = train(cm, fm, BLOCKS, config)
    assert curve[-1]["total"] < curve[0]["total"]
    _, again = train(cm, fm, BLOCKS, config)
    assert again == curve
    assert [row["epoch"] for row in curve] == list(range(1, 61))


def test_reconstruct_consistency_and_corruption():
    cm, fm = clique_pair()
    config = ModelConfig(epochs=80, seed=1)
    params, _ = train(cm, fm, BLOCKS, config)
    cm_hat, fm_hat, b = reconstruct(params, cm, fm, BLOCKS, config)
    cm_hat2, fm_hat2, _ = reconstruct(params, cm, fm, BLOCKS, config)
    assert np.array_equal(cm_hat, cm_hat2) and np.array_equal(fm_hat, fm_hat2)
    direct = compute_loss(cm, fm, BLOCKS, cm_hat, fm_hat, config)
    assert np.array_equal(direct.RE, b.RE) and direct.total == b.total
    assert abs(b.total - b.RE.mean()) <= 1e-12
    corrupted = fm.copy()
    corrupted[2] = 1.0 - corrupted[2]
    _, _, bc = reconstruct(params, cm, corrupted, BLOCKS, config)
    assert bc.RE[2] > b.RE[2]
    with pytest.raises(ValueError):
        reconstruct(params, cm[:9, :9], fm[:9], BLOCKS, config)


def test_no_embedding_ablation_ignores_embedding_values():
    cm, fm = clique_pair()
    config = ModelConfig(epochs=10, seed=2).with_ablation("no-embedding")
    params, _ = train(cm, fm, BLOCKS, config)
    other = fm.copy()
    other[:, BLOCKS["embedding"]] = np.random.default_rng(0).random((10, 3))
    a = reconstruct(params, cm, fm, BLOCKS, config)[2].RE
    b = reconstruct(params, cm, other, BLOCKS, config)[2].RE
    assert np.array_equal(a, b)


def test_kl_weight_adds_to_total():
    cm, fm = clique_pair()
    config = ModelConfig(epochs=5, seed=2, kl_weight=0.5)
    params, _ = train(cm, fm, BLOCKS, config)
    _, _, b = reconstruct(params, cm, fm, BLOCKS, config)
    assert b.kl > 0 and abs(b.total - (b.RE.mean() + 0.5 * b.kl)) <= 1e-12


def test_permutation_equivariance():
    rng = np.random.default_rng(9)
    n = 6
    config = ModelConfig(gcn_filters=5, latent_dim=3)
    cm, fm = random_cm(rng, n), random_fm(rng, n)
    params = init_params(n, F, config, rng)
    perm = rng.permutation(n)
    p2 = dict(params)
    p2["W_feat_head_1"] = params["W_feat_head_1"][perm]
    p2["W_adj_head_1"] = params["W_adj_head_1"][perm]
    p2["W_adj_head_2"] = params["W_adj_head_2"][:, perm]
    p2["b_adj_head_2"] = params["b_adj_head_2"][:, perm]
    _, _, b1 = reconstruct(params, cm, fm, BLOCKS, config)
    _, _, b2 = reconstruct(p2, cm[np.ix_(perm, perm)], fm[perm], BLOCKS, config)
    assert np.allclose(b2.RE, b1.RE[perm], rtol=0, atol=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_features_abort():
    cm, fm = clique_pair()
    fm[3, 0] = np.nan
    with pytest.raises(FloatingPointError, match="node rows"):
        train(cm, fm, BLOCKS, ModelConfig(epochs=2))


def test_empty_graph_rejected():
    with pytest.raises(ValueError):
        train(np.zeros((0, 0)), np.zeros((0, F)), BLOCKS)
