import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from heliopress import engine as E
from heliopress.attention import (
    WcbamParams,
    WnlamParams,
    attention_gate,
    residual_attention_block,
    wcbam_channel_attention,
    wcbam_forward,
    wcbam_spatial_attention,
    window_merge,
    window_partition,
    wnlam_forward,
    wnlam_weights,
)
from heliopress.engine import InvalidShapeError, Tensor
from heliopress.model import ArchConfig, CodecModel
from heliopress.transforms import (
    analysis_transform,
    discriminator_forward,
    gdn_forward,
    hyper_analysis,
    hyper_synthesis,
    igdn_forward,
    synthesis_transform,
)


@pytest.fixture(scope="module")
def model():
    return CodecModel.initialize(ArchConfig(), seed=3)


def zeroed(model, prefix=""):
    """Zero every weight and bias; GDN layers are set to identity (beta=1, gamma=0)."""
    m = model.copy()
    for name in m.names(prefix):
        m[name].data[...] = 1.0 if name.endswith(".beta") else 0.0
    return m


# -- GDN / IGDN ----------------------------------------------------------------


def gdn_loop(x, beta, gamma, inverse=False):
    out = np.empty_like(x)
    n, c, h, w = x.shape
    for a in range(n):
        for i in range(h):
            for j in range(w):
                for ch in range(c):
                    norm = beta[ch] + sum(gamma[ch, k] * abs(x[a, k, i, j]) for k in range(c))
                    out[a, ch, i, j] = x[a, ch, i, j] * norm if inverse else x[a, ch, i, j] / norm
    return out


@pytest.mark.parametrize("inverse", [False, True])
def test_gdn_matches_loop(inverse):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 4, 6, 6))
    beta = rng.uniform(0.5, 2, size=4)
    gamma = rng.uniform(0, 0.5, size=(4, 4))
    fn = igdn_forward if inverse else gdn_forward
    assert np.abs(fn(x, beta, gamma).data - gdn_loop(x, beta, gamma, inverse)).max() < 1e-12


@pytest.mark.parametrize("fn", [gdn_forward, igdn_forward])
def test_gdn_identity_parameters(fn):
    x = np.random.default_rng(1).normal(size=(2, 3, 4, 4))
    assert np.array_equal(fn(x, np.ones(3), np.zeros((3, 3))).data, x)


def test_gdn_scalar_case():
    out = gdn_forward(np.full((1, 1, 1, 1), 2.0), np.ones(1), np.ones((1, 1)))
    assert out.item() == pytest.approx(2.0 / 3.0, abs=1e-15)


@given(st.floats(-50, 50), st.floats(0.1, 3), st.floats(0, 3))
def test_gdn_scalar_closed_form(x, beta, gamma):
    """C=1: g = x/(b+c|x|) and igdn(g) = g*(b+c|g|); both have closed forms."""
    g = gdn_forward(np.full((1, 1, 1, 1), x), np.array([beta]), np.array([[gamma]])).item()
    assert g == pytest.approx(x / (beta + gamma * abs(x)), rel=1e-14, abs=1e-300)
    back = igdn_forward(np.full((1, 1, 1, 1), g), np.array([beta]), np.array([[gamma]])).item()
    assert back == pytest.approx(g * (beta + gamma * abs(g)), rel=1e-14, abs=1e-300)


def test_projection_invariant(model):
    m = model.copy()
    m["g_a.gdn0.beta"].data[:] = -1.0
    m["g_s.igdn1.gamma"].data[0, 1] = -0.5
    m.project()
    assert m["g_a.gdn0.beta"].data.min() >= 1e-6
    assert m["g_s.igdn1.gamma"].data.min() >= 0.0


# -- shape laws ----------------------------------------------------------------


@pytest.mark.parametrize("h, w", [(64, 64), (128, 64), (64, 192), (192, 128)])
def test_shape_laws_desk(model, h, w):
    x = np.random.default_rng(0).uniform(size=(1, 1, h, w))
    with E.no_grad():
        y = analysis_transform(x, model)
        z = hyper_analysis(y, model)
        ctx = hyper_synthesis(z, model)
        x_hat = synthesis_transform(y, model)
        d = discriminator_forward(x, y, model)
    arch = model.arch
    assert y.shape == (1, arch.latent_channels, h // 16, w // 16)
    assert z.shape == (1, arch.hyper_channels, h // 64, w // 64)
    assert ctx.shape == (1, arch.ctx_channels, h // 16, w // 16)
    assert x_hat.shape == x.shape
    assert d.shape == (1, 1, h // 16, w // 16)


@pytest.mark.parametrize("h, w", [(63, 64), (64, 80)])
def test_analysis_rejects_non_divisible(model, h, w):
    with pytest.raises(InvalidShapeError):
        analysis_transform(np.zeros((1, 1, h, w)), model)


def test_zero_model_paths(model):
    m = zeroed(model)
    x = np.random.default_rng(0).uniform(size=(1, 1, 64, 64))
    with E.no_grad():
        assert not analysis_transform(x, m).data.any()
        assert not hyper_analysis(np.ones((1, 12, 4, 4)), m).data.any()
        assert not hyper_synthesis(np.ones((1, 6, 1, 1)), m).data.any()
        m["g_s.tconv3.bias"].data[:] = 1.7
        assert np.all(synthesis_transform(np.zeros((1, 12, 4, 4)), m).data == 1.0)
        d = discriminator_forward(x, np.ones((1, 12, 4, 4)), m)
    assert np.all(d.data == 0.5)


def test_synthesis_clamps(model):
    with E.no_grad():
        out = synthesis_transform(np.random.default_rng(0).normal(scale=40, size=(1, 12, 4, 4)), model)
    assert out.data.min() >= 0.0 and out.data.max() <= 1.0


def test_discriminator_open_range(model):
    rng = np.random.default_rng(2)
    with E.no_grad():
        d = discriminator_forward(rng.uniform(size=(2, 1, 64, 64)), rng.normal(size=(2, 12, 4, 4)), model)
    assert d.shape == (2, 1, 4, 4)
    assert np.all((d.data > 0) & (d.data < 1))


def test_forward_deterministic(model):
    x = np.random.default_rng(5).uniform(size=(1, 1, 64, 64))
    with E.no_grad():
        a = synthesis_transform(analysis_transform(x, model), model).data
        b = synthesis_transform(analysis_transform(x, model), model).data
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("part", ["h_a", "h_s"])
def test_hyper_gradients(model, part):
    rng = np.random.default_rng(4)
    if part == "h_a":
        inp, fn = rng.normal(size=(1, 12, 4, 4)), hyper_analysis
    else:
        inp, fn = rng.normal(size=(1, 6, 1, 1)), hyper_synthesis
    with np.errstate(all="ignore"):
        err = E.grad_check(lambda t: E.square(fn(t, model)).sum(), inp, h=1e-6)
    assert err < 1e-4


# -- windows -------------------------------------------------------------------


def test_window_order():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    wins = window_partition(x, 2).data
    assert wins.shape == (4, 1, 2, 2)
    assert wins[:, 0, 0, 0].tolist() == [0.0, 2.0, 8.0, 10.0]  # TL, TR, BL, BR


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.sampled_from([1, 2, 4]), st.integers(1, 3), st.integers(1, 3))
def test_window_merge_inverts_partition(n, c, w, nh, nw):
    x = np.random.default_rng(n * 100 + c).normal(size=(n, c, nh * w, nw * w))
    out = window_merge(window_partition(x, w), n, nh * w, nw * w).data
    assert np.array_equal(out, x)


def test_window_rejects_non_divisor():
    with pytest.raises(InvalidShapeError):
        window_partition(np.zeros((1, 1, 6, 6)), 4)


# -- WNLAM ---------------------------------------------------------------------


def rand_wnlam(rng, c=4, cb=2):
    return [rng.normal(scale=0.7, size=s) for s in [(cb, c, 1, 1)] * 3 + [(c, cb, 1, 1)]]


def wnlam_pairs(x, theta, phi, g, z, w):
    """Naive double loop over (query, key) pairs inside each window."""
    n, c, h, wd = x.shape
    th, ph, gg, zz = (p[:, :, 0, 0] for p in (theta, phi, g, z))
    out = x.copy()
    for b in range(n):
        for oy in range(0, h, w):
            for ox in range(0, wd, w):
                cells = [(oy + i, ox + j) for i in range(w) for j in range(w)]
                for qi, qj in cells:
                    q = x[b, :, qi, qj]
                    logits = []
                    for ki, kj in cells:
                        logits.append(float(np.dot(th @ q, ph @ x[b, :, ki, kj])))
                    logits = np.array(logits)
                    wts = np.exp(logits - logits.max())
                    wts = wts / wts.sum()
                    acc = np.zeros(gg.shape[0])
                    for wk, (ki, kj) in zip(wts, cells):
                        acc += wk * (gg @ x[b, :, ki, kj])
                    out[b, :, qi, qj] += zz @ acc
    return out


@pytest.mark.parametrize("seed", range(4))
def test_wnlam_bruteforce(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 4, 8, 8))
    p = rand_wnlam(rng)
    got = wnlam_forward(x, WnlamParams(*map(Tensor, p)), 4).data
    assert np.abs(got - wnlam_pairs(x, *p, 4)).max() <= 1e-10


def test_wnlam_zero_wz_is_identity():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 4, 8, 8))
    p = rand_wnlam(rng)
    p[3] = np.zeros_like(p[3])
    assert np.array_equal(wnlam_forward(x, WnlamParams(*map(Tensor, p)), 4).data, x)


def test_wnlam_uniform_attention():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 4, 4, 4))
    p = rand_wnlam(rng)
    p[0] = np.zeros_like(p[0])
    p[1] = np.zeros_like(p[1])
    got = wnlam_forward(x, WnlamParams(*map(Tensor, p)), 4).data
    gmean = (p[2][:, :, 0, 0] @ x[0].reshape(4, -1)).mean(axis=1)
    expected = x + (p[3][:, :, 0, 0] @ gmean)[None, :, None, None]
    assert np.abs(got - expected).max() < 1e-12


def test_wnlam_weights_are_distributions():
    rng = np.random.default_rng(3)
    xw = window_partition(rng.normal(size=(1, 4, 8, 8)), 4)
    a = wnlam_weights(xw, WnlamParams(*map(Tensor, rand_wnlam(rng)))).data
    assert a.min() >= 0.0
    assert np.abs(a.sum(axis=-1) - 1.0).max() <= 1e-12


def test_wnlam_window_independence():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 4, 8, 8))
    p = WnlamParams(*map(Tensor, rand_wnlam(rng)))
    before = wnlam_forward(x, p, 4).data
    x2 = x.copy()
    block = x2[:, :, 4:, 4:].reshape(1, 4, 16)
    x2[:, :, 4:, 4:] = block[:, :, rng.permutation(16)].reshape(1, 4, 4, 4)  # shuffle another window
    after = wnlam_forward(x2, p, 4).data
    assert np.array_equal(before[:, :, :4, :4], after[:, :, :4, :4])


# -- WCBAM ---------------------------------------------------------------------


def rand_wcbam(rng, c=4, w=4, k=7):
    return WcbamParams(Tensor(rng.normal(size=(2, c))), Tensor(rng.normal(size=2)),
                       Tensor(rng.normal(size=(c, 2))), Tensor(rng.normal(size=c)),
                       Tensor(rng.normal(scale=0.3, size=(1, 2, k, k))), Tensor(rng.normal(size=1)), w)


def mlp(v, p):
    return p.fc2_w.data @ np.maximum(p.fc1_w.data @ v + p.fc1_b.data, 0) + p.fc2_b.data


def channel_gate_oracle(x, p):
    return special.expit(mlp(x.mean(axis=(1, 2)), p) + mlp(x.max(axis=(1, 2)), p))


def spatial_gate_oracle(xc, p):
    """Explicit zero-padded 2-in/1-out correlation over [avg_c, max_c]."""
    k = p.spatial_w.shape[-1]
    r = k // 2
    maps = np.stack([xc.mean(axis=0), xc.max(axis=0)])
    pad = np.pad(maps, ((0, 0), (r, r), (r, r)))
    h, w = xc.shape[1:]
    out = np.empty((h, w))
    for i in range(h):
        for j in range(w):
            out[i, j] = np.sum(pad[:, i:i + k, j:j + k] * p.spatial_w.data[0]) + p.spatial_b.data[0]
    return special.expit(out)


def wcbam_oracle(x, p):
    out = np.empty_like(x)
    w = p.window
    for b in range(x.shape[0]):
        xc = x[b].copy()
        for oy in range(0, x.shape[2], w):
            for ox in range(0, x.shape[3], w):
                blk = xc[:, oy:oy + w, ox:ox + w]
                xc[:, oy:oy + w, ox:ox + w] = blk * channel_gate_oracle(blk, p)[:, None, None]
        out[b] = xc * spatial_gate_oracle(xc, p)[None]
    return out


@pytest.mark.parametrize("seed", range(3))
def test_wcbam_matches_composition(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 4, 8, 12))
    p = rand_wcbam(rng)
    assert np.abs(wcbam_forward(x, p).data - wcbam_oracle(x, p)).max() <= 1e-12


def test_channel_gate_matches_formula():
    rng = np.random.default_rng(8)
    p = rand_wcbam(rng)
    xw = rng.normal(size=(3, 4, 4, 4))
    got = wcbam_channel_attention(xw, p).data[:, :, 0, 0]
    expected = np.stack([channel_gate_oracle(b, p) for b in xw])
    assert np.abs(got - expected).max() <= 1e-12


def test_channel_gate_constant_window():
    rng = np.random.default_rng(9)
    p = rand_wcbam(rng)
    vals = rng.normal(size=4)
    xw = np.broadcast_to(vals[None, :, None, None], (1, 4, 4, 4)).copy()
    got = wcbam_channel_attention(xw, p).data[0, :, 0, 0]
    assert np.abs(got - special.expit(2 * mlp(vals, p))).max() <= 1e-12


def test_spatial_gate_single_channel():
    rng = np.random.default_rng(10)
    p = rand_wcbam(rng)
    x = rng.normal(size=(1, 1, 8, 8))
    got = wcbam_spatial_attention(x, p).data[0, 0]
    assert np.abs(got - spatial_gate_oracle(x[0], p)).max() <= 1e-12


def test_wcbam_zeroed_gates_quarter():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 4, 8, 8))
    p = rand_wcbam(rng)
    for t in (p.fc1_w, p.fc1_b, p.fc2_w, p.fc2_b, p.spatial_w, p.spatial_b):
        t.data[...] = 0.0
    assert np.array_equal(wcbam_forward(x, p).data, 0.25 * x)


def test_wcbam_full_window_is_plain_cbam():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(1, 4, 8, 8))
    p = rand_wcbam(rng, w=8)
    gate = channel_gate_oracle(x[0], p)
    xc = x[0] * gate[:, None, None]
    expected = xc * spatial_gate_oracle(xc, p)[None]
    assert np.abs(wcbam_forward(x, p).data[0] - expected).max() <= 1e-12


def test_gates_in_open_interval():
    rng = np.random.default_rng(7)
    p = rand_wcbam(rng)
    x = rng.normal(scale=3, size=(1, 4, 8, 8))
    ca = wcbam_channel_attention(window_partition(x, 4), p).data
    sa = wcbam_spatial_attention(x, p).data
    assert np.all((ca > 0) & (ca < 1)) and np.all((sa > 0) & (sa < 1))


# -- residual attention block --------------------------------------------------


def test_residual_block_gated_off(model):
    m = model.copy()
    m["g_a.attn0.mask.out.weight"].data[...] = 0.0
    m["g_a.attn0.mask.out.bias"].data[...] = -50.0
    x = np.random.default_rng(0).normal(size=(1, 8, 8, 8))
    out = residual_attention_block(x, m, "g_a.attn0").data
    assert np.abs(out - x).max() <= 1e-10


def test_zero_trunk_output_is_identity():
    rng = np.random.default_rng(1)
    x, m = rng.normal(size=(1, 8, 8, 8)), rng.normal(size=(1, 8, 8, 8))
    assert np.array_equal(attention_gate(Tensor(x), Tensor(np.zeros_like(x)), Tensor(m)).data, x)


def test_attention_gate_formula():
    rng = np.random.default_rng(2)
    x, t, m = (rng.normal(size=(1, 2, 3, 3)) for _ in range(3))
    got = attention_gate(Tensor(x), Tensor(t), Tensor(m)).data
    assert np.abs(got - (x + t * special.expit(m))).max() < 1e-15


def test_residual_block_gradient(model):
    x = np.random.default_rng(3).normal(size=(1, 8, 8, 8))
    with np.errstate(all="ignore"):
        err = E.grad_check(lambda t: E.square(residual_attention_block(t, model, "g_s.attn1")).sum(), x,
                           h=1e-6, max_coords=30)
    assert err < 1e-4
