import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tame.backbone import (
    SPECTRAL,
    TEMPORAL,
    PatchConfig,
    SsmBlockParams,
    backbone_forward,
    causal_conv1d,
    embed,
    init_block,
    init_stack,
    mamba_block,
    patchify,
    selective_scan,
    stack_forward,
    unpatchify,
)
from tame.errors import ConfigError, DimensionError
from tame.frontend import preset
from tame.model import ModelConfig, init_params
from tame.tensor import Tensor, grad_check


def naive_scan(u, delta, A, B, C, D):
    """Step-by-step recurrence on a single ``(T, E)`` sequence."""
    T, E = u.shape
    N = A.shape[1]
    h = np.zeros((E, N))
    y = np.zeros((T, E))
    for t in range(T):
        for e in range(E):
            for n in range(N):
                h[e, n] = np.exp(delta[t, e] * A[e, n]) * h[e, n] + delta[t, e] * B[t, n] * u[t, e]
            y[t, e] = np.dot(C[t], h[e]) + D[e] * u[t, e]
    return y


def random_scan_case(rng, T, E, N, lead=()):
    u = rng.standard_normal((*lead, T, E))
    delta = rng.uniform(0.01, 1.0, (*lead, T, E))
    A = -np.exp(rng.standard_normal((E, N)))
    B = rng.standard_normal((*lead, T, N))
    C = rng.standard_normal((*lead, T, N))
    D = rng.standard_normal(E)
    return u, delta, A, B, C, D


def scan(*arrays):
    return selective_scan(*(Tensor(a) for a in arrays)).data


# -- patches ---------------------------------------------------------------------
def test_patch_shapes_default():
    x = np.zeros((4, 224, 16))
    cfg = PatchConfig()
    assert patchify(x, TEMPORAL, cfg).shape == (56, 256)
    assert patchify(x, SPECTRAL, cfg).shape == (16, 896)


def test_patch_contents():
    x = np.arange(2 * 8 * 4, dtype=float).reshape(2, 8, 4)
    cfg = PatchConfig(W=2, H=1)
    t = patchify(x, TEMPORAL, cfg)
    np.testing.assert_array_equal(t[1], x[:, 2:4, :].reshape(-1))
    s = patchify(x, SPECTRAL, cfg)
    # highest mel bin first
    np.testing.assert_array_equal(s[0], x[:, :, 3].reshape(-1))
    low_first = patchify(x, SPECTRAL, PatchConfig(W=2, H=1, spectral_high_first=False))
    np.testing.assert_array_equal(low_first[0], x[:, :, 0].reshape(-1))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3),
       st.booleans(), st.integers(0, 2**31))
def test_patches_lossless(kappa, j, W, sj, H, high_first, seed):
    cfg = PatchConfig(W=W, H=H, spectral_high_first=high_first)
    R, S = j * W, sj * H
    x = np.random.default_rng(seed).standard_normal((2, kappa, R, S))
    for axis in (TEMPORAL, SPECTRAL):
        np.testing.assert_array_equal(unpatchify(patchify(x, axis, cfg), axis, cfg, kappa, R, S), x)


def test_indivisible_extent():
    with pytest.raises(ConfigError):
        PatchConfig(W=3).n_patches(TEMPORAL, 224, 16)


# -- embedding --------------------------------------------------------------------
def test_embed_shape_and_token_last():
    rng = np.random.default_rng(0)
    patches = rng.standard_normal((16, 256))
    out = embed(patches, Tensor(rng.standard_normal((256, 192))), Tensor(rng.standard_normal(192)),
                Tensor(np.zeros((17, 192))))
    assert out.shape == (17, 192)


def test_embed_zero_patches():
    token = np.random.default_rng(1).standard_normal(8)
    out = embed(np.zeros((5, 12)), Tensor(np.ones((12, 8))), Tensor(token), Tensor(np.zeros((6, 8)))).data
    assert np.all(out[:5] == 0.0)
    np.testing.assert_array_equal(out[5], token)


def test_embed_identity_projection():
    patches = np.random.default_rng(2).standard_normal((4, 6))
    W = np.eye(6, 8)
    out = embed(patches, Tensor(W), Tensor(np.zeros(8)), Tensor(np.zeros((5, 8)))).data
    np.testing.assert_array_equal(out[:4, :6], patches)
    assert np.all(out[:4, 6:] == 0.0)


def test_embed_shape_errors():
    with pytest.raises(DimensionError):
        embed(np.zeros((4, 6)), Tensor(np.eye(6, 8)), Tensor(np.zeros(8)), Tensor(np.zeros((4, 8))))


# -- selective scan ---------------------------------------------------------------
def test_scan_zero_input():
    u, delta, A, B, C, D = random_scan_case(np.random.default_rng(3), 10, 3, 4)
    assert np.all(scan(np.zeros_like(u), delta, A, B, C, D) == 0.0)


def test_scan_memoryless_limit():
    rng = np.random.default_rng(4)
    u, delta, _, B, C, D = random_scan_case(rng, 7, 3, 5)
    A = -np.exp(np.full((3, 5), 40.0))  # exp(delta * A) underflows to 0
    expected = np.einsum("tn,tn->t", C, B)[:, None] * delta * u + D * u
    np.testing.assert_allclose(scan(u, delta, A, B, C, D), expected, rtol=1e-13, atol=1e-13)


def test_scan_twelve_steps():
    case = random_scan_case(np.random.default_rng(5), 12, 4, 6)
    assert np.max(np.abs(scan(*case) - naive_scan(*case))) < 1e-10


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 64), st.integers(1, 8), st.integers(1, 16), st.integers(0, 2**31))
def test_scan_matches_recurrence(T, E, N, seed):
    case = random_scan_case(np.random.default_rng(seed), T, E, N)
    assert np.max(np.abs(scan(*case) - naive_scan(*case))) < 1e-10


def test_scan_batched_matches_per_sequence():
    case = random_scan_case(np.random.default_rng(6), 9, 3, 4, lead=(2, 3))
    out = scan(*case)
    u, delta, A, B, C, D = case
    for i in range(2):
        for j in range(3):
            ref = naive_scan(u[i, j], delta[i, j], A, B[i, j], C[i, j], D)
            assert np.max(np.abs(out[i, j] - ref)) < 1e-10


def test_scan_gradients():
    rng = np.random.default_rng(7)
    tensors = [Tensor(a, requires_grad=True) for a in random_scan_case(rng, 6, 3, 4, lead=(2,))]
    probe = Tensor(rng.standard_normal((2, 6, 3)))
    assert grad_check(lambda: (selective_scan(*tensors) * probe).sum(), tensors) < 1e-6


def test_conv_is_causal_and_differentiable():
    rng = np.random.default_rng(8)
    x = Tensor(rng.standard_normal((2, 7, 3)), requires_grad=True)
    w, b = Tensor(rng.standard_normal((3, 4)), requires_grad=True), Tensor(rng.standard_normal(3), requires_grad=True)
    out = causal_conv1d(x, w, b).data
    x2 = x.data.copy()
    x2[:, 5:] += 1.0
    np.testing.assert_array_equal(causal_conv1d(Tensor(x2), w, b).data[:, :5], out[:, :5])
    # tap K-1 multiplies the current input
    np.testing.assert_allclose(out[:, 0], x.data[:, 0] * w.data[:, 3] + b.data, atol=1e-15)
    probe = Tensor(rng.standard_normal((2, 7, 3)))
    assert grad_check(lambda: (causal_conv1d(x, w, b) * probe).sum(), [x, w, b]) < 1e-6


# -- blocks -----------------------------------------------------------------------
def _block(rng, cfg, zero=False):
    arrays = init_block(rng, cfg, "b", cfg.L)
    if zero:
        arrays = {k: np.zeros_like(v) for k, v in arrays.items()}
    return SsmBlockParams.from_store({k: Tensor(v, requires_grad=True) for k, v in arrays.items()}, "b")


def test_zero_block_is_identity():
    cfg = PatchConfig(D=8, L=1, n_state=4)
    x = np.random.default_rng(9).standard_normal((5, 8))
    assert mamba_block(Tensor(x), _block(np.random.default_rng(0), cfg, zero=True)).data.tobytes() == x.tobytes()


def test_block_shape():
    cfg = PatchConfig(D=8, L=1, n_state=4)
    out = mamba_block(Tensor(np.random.default_rng(1).standard_normal((3, 6, 8))), _block(np.random.default_rng(0), cfg))
    assert out.shape == (3, 6, 8)


def _silu(v):
    return v / (1.0 + np.exp(-v))


def test_single_token_block_matches_memoryless_formula():
    cfg = PatchConfig(D=8, L=1, n_state=4)
    p = _block(np.random.default_rng(10), cfg)
    x = np.random.default_rng(11).standard_normal((1, 8))
    E, N, r = cfg.E, cfg.n_state, cfg.rank
    ms = np.sqrt(np.mean(x**2) + 1e-6)
    xz = (x / ms * p.norm.data) @ p.in_proj.data
    xs = _silu(xz[:, :E] * p.conv_w.data[:, -1] + p.conv_b.data)
    dbc = xs @ p.x_proj.data
    delta = np.logaddexp(0.0, dbc[:, :r] @ p.dt_proj.data + p.dt_bias.data)
    Bt, Ct = dbc[:, r:r + N], dbc[:, r + N:]
    y = (Ct * Bt).sum() * delta * xs + p.D.data * xs
    expected = x + (y * _silu(xz[:, E:])) @ p.out_proj.data
    np.testing.assert_allclose(mamba_block(Tensor(x), p).data, expected, rtol=1e-12, atol=1e-12)


@settings(max_examples=10, deadline=None)
@given(st.integers(2, 9), st.data())
def test_stack_is_causal(T, data):
    t = data.draw(st.integers(0, T - 1))
    cfg = PatchConfig(D=8, L=2, n_state=4)
    rng = np.random.default_rng(T)
    store = {k: Tensor(v) for k, v in init_stack(rng, cfg, "s", 4, T - 1).items()}
    x = rng.standard_normal((T, 8))
    base = stack_forward(Tensor(x), store, "s", cfg.L).data
    x[t:] += rng.standard_normal((T - t, 8))
    moved = stack_forward(Tensor(x), store, "s", cfg.L).data
    np.testing.assert_array_equal(moved[:t], base[:t])


def _store(cfg: ModelConfig, seed=0):
    return init_params(cfg, seed).tensors


@pytest.mark.parametrize("name,J_t", [("J16", 16), ("default", 56)])
def test_backbone_output_shapes(name, J_t):
    fe = preset(name)
    cfg = ModelConfig.for_frontend(fe, patch=PatchConfig(D=192, L=1))
    x = np.random.default_rng(12).standard_normal((1, 4, fe.n_frames, 16))
    out = backbone_forward(x, _store(cfg), cfg.patch)
    assert out[TEMPORAL].tokens.shape == (1, J_t + 1, 192)
    assert out[SPECTRAL].tokens.shape == (1, 17, 192)
    assert out[TEMPORAL].J == J_t and out[TEMPORAL].token.shape == (1, 192)


def test_last_patch_perturbation_is_causal():
    fe = preset("J16")
    cfg = ModelConfig.for_frontend(fe, patch=PatchConfig(D=12, L=2, n_state=4))
    store = _store(cfg)
    x = np.random.default_rng(13).standard_normal((1, 4, 64, 16))
    base = backbone_forward(x, store, cfg.patch, (TEMPORAL,))[TEMPORAL].tokens.data
    x[..., -4:, :] += 1.0
    moved = backbone_forward(x, store, cfg.patch, (TEMPORAL,))[TEMPORAL].tokens.data
    np.testing.assert_array_equal(moved[:, :15], base[:, :15])
    assert not np.array_equal(moved[:, 16], base[:, 16])
