import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from idadapt import _tape as tp
from idadapt import diffusion as dfu
from idadapt import dit
from idadapt import numerics as nm
from idadapt import pipeline as pl
from idadapt.errors import ContractError, DimensionError

from conftest import TINY, as_float64, jitter

D = TINY.d
N_TXT = 6


def silu_ref(x):
    return x / (1 + np.exp(-x))


def ln_ref(x, eps=1e-5):
    return (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + eps)


def softmax_ref(s):
    e = np.exp(s - s.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def rand(seed, *shape):
    return np.random.default_rng(seed).standard_normal(shape).astype(np.float32)


@pytest.fixture(scope="module")
def params(tiny_model):
    return tiny_model.params


@pytest.fixture(scope="module")
def trained(params):
    """Every tensor moved away from init, so zero-initialised paths become live."""
    return jitter(params, 99)


# -- layout -------------------------------------------------------------------


def test_layout_spans_ordered_and_disjoint():
    lay = dit.SequenceLayout(6, 16, 32)
    assert lay.txt == (0, 6) and lay.vid == (6, 22) and lay.face == (22, 54)
    assert [n for n, _ in lay.spans()] == ["txt", "vid", "face"]
    assert [n for n, _ in dit.SequenceLayout(6, 16, 0).spans()] == ["txt", "vid"]


def test_layout_rejects_empty_spans():
    with pytest.raises(DimensionError):
        dit.SequenceLayout(0, 4)


# -- parameters and placement -------------------------------------------------


def test_adapters_on_even_layers_only(ref_model):
    blocks = {int(k.split(".")[1][3:]) for k in ref_model.params if k.startswith("adapter.blk")}
    assert blocks == {0, 2}


def test_zero_initialised_adapter_outputs(params):
    for l in TINY.adapter_layers():
        for name in ("phi_face.w2", "phi_face.b2", "phi_cond.w2", "phi_cond.b2", "wo_ca"):
            assert not params[f"adapter.blk{l}.{name}"].any()


def test_non_adapter_layer_face_span_reuses_video_factors(trained):
    P = {k: tp.leaf(v) for k, v in trained.items()}
    t_embed = tp.leaf(rand(1, 1, TINY.d_t))
    lay = dit.SequenceLayout(N_TXT, 8, 32)
    ctx = dit.id_context_graph(P, tp.leaf(rand(2, 1, 2, D)), 1, np.float32)
    odd = dit.block_factors(P, 1, t_embed, lay, dit.Machinery(), ctx)
    assert odd["face"] is odd["vid"]
    even = dit.block_factors(P, 0, t_embed, lay, dit.Machinery(), ctx)
    assert even["face"] is not even["vid"]


def test_face_predictor_and_can_refused_on_odd_layers(params):
    t = dit.time_embedding(3, params)
    with pytest.raises(ContractError):
        dit.modulation_base(t, 1, params, "phi_face")
    with pytest.raises(ContractError):
        dit.can_residual(t, 1, np.zeros(D, np.float32), rand(0, 2, D), params)
    with pytest.raises(DimensionError):
        dit.modulation_base(t, 7, params)


# -- modulation predictors ----------------------------------------------------


def test_zero_init_face_predictor_gives_zero_factors(params):
    m = dit.modulation_base(dit.time_embedding(5, params), 0, params, "phi_face")
    assert all(not f.any() for f in m.as_tuple())


def test_predictor_deterministic(params):
    t = dit.time_embedding(5, params)
    a = dit.modulation_base(t, 1, params, "phi_txt")
    b = dit.modulation_base(t, 1, params, "phi_txt")
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.as_tuple(), b.as_tuple()))


def test_predictor_matches_direct_two_layer_map(trained):
    w = as_float64(trained)
    t_embed = dit.time_embedding(11, w)
    m = dit.modulation_base(t_embed, 1, w, "phi_vid")
    pre = "base.blk1.phi_vid"
    inp = np.concatenate([t_embed, w["base.layer_emb"][1]])
    out = silu_ref(inp @ w[f"{pre}.w1"] + w[f"{pre}.b1"]) @ w[f"{pre}.w2"] + w[f"{pre}.b2"]
    assert np.max(np.abs(np.concatenate(m.as_tuple()) - out)) < 1e-12


def test_time_embedding_matches_direct_map(params):
    w = as_float64(params)
    feats = dit.sinusoid([17], TINY.d_t)[0]
    expected = silu_ref(feats @ w["base.time.w1"] + w["base.time.b1"]) @ w["base.time.w2"] + w["base.time.b2"]
    assert np.max(np.abs(dit.time_embedding(17, w) - expected)) < 1e-12


# -- CAN ----------------------------------------------------------------------


def test_zero_init_can_is_exact_residual_identity(params):
    t = dit.time_embedding(9, params)
    base = dit.modulation_base(t, 0, params, "phi_vid")
    hat_vid, hat_txt = dit.can_residual(t, 0, base.mu1, rand(3, 2, D), params)
    for h, b in zip(hat_vid.as_tuple(), base.as_tuple()):
        assert not h.any()
        assert (h + b).tobytes() == b.tobytes()
    assert all(not h.any() for h in hat_txt.as_tuple())


def test_can_depends_on_mu1(trained):
    t = dit.time_embedding(9, trained)
    x_id = rand(4, 2, D)
    a, _ = dit.can_residual(t, 0, rand(5, D), x_id, trained)
    b, _ = dit.can_residual(t, 0, rand(6, D), x_id, trained)
    assert np.abs(a.mu1 - b.mu1).max() > 0

    w = as_float64(trained)
    t64 = dit.time_embedding(9, w)
    mu = rand(5, D).astype(np.float64)
    g = nm.finite_diff_grad(lambda m: dit.can_residual(t64, 0, m, x_id.astype(np.float64), w)[0].sigma1.sum(), mu)
    assert np.linalg.norm(g) > 0


def test_can_output_matches_direct_map(trained):
    w = as_float64(trained)
    t = dit.time_embedding(2, w)
    mu, x_id = rand(7, D).astype(np.float64), rand(8, 2, D).astype(np.float64)
    hat_vid, hat_txt = dit.can_residual(t, 0, mu, x_id, w)
    ctx = x_id.reshape(-1) @ w["adapter.id_global.w"] + w["adapter.id_global.b"]
    pre = "adapter.blk0.phi_cond"
    out = silu_ref(np.concatenate([ctx, t, mu]) @ w[f"{pre}.w1"] + w[f"{pre}.b1"]) @ w[f"{pre}.w2"] + w[f"{pre}.b2"]
    got = np.concatenate(hat_vid.as_tuple() + hat_txt.as_tuple())
    assert np.max(np.abs(got - out)) < 1e-12


def test_trained_can_responds_to_identity(tiny_model):
    """After 100 training steps phi_cond has left zero and x_id moves the residual factors."""
    cfg = TINY
    samples = _toy_samples(tiny_model, 4)
    src = dfu.BatchSource(samples, 2, tiny_model.codec, nm.RngState(1))
    opt = dfu.OptimizerState(lr=1e-2, total_steps=100)
    schedule = dfu.NoiseSchedule.from_config(cfg)
    p = tiny_model.params
    for k in range(100):
        p, opt, _ = dfu.train_step(p, src.batch(k), opt, "image_pretrain", cfg, tiny_model.codec, schedule,
                                   nm.RngState(2).substream(k))
    t = dit.time_embedding(10, p)
    mu = dit.modulation_base(t, 0, p, "phi_vid").mu1
    a, _ = dit.can_residual(t, 0, mu, rand(9, 2, D), p)
    b, _ = dit.can_residual(t, 0, mu, rand(10, 2, D), p)
    assert np.abs(np.concatenate(a.as_tuple()) - np.concatenate(b.as_tuple())).max() > 1e-6


def _toy_samples(model, n):
    ds = pl.generate_datasets(TINY, model.params)
    return pl.samples_from_datasets(ds, model.params)["image"][:n]


# -- modulate and gated residual ---------------------------------------------


def test_modulate_identity_factors():
    x = rand(11, 5, D)
    z = np.zeros(D, np.float32)
    assert dit.modulate(x, z, z).tobytes() == nm.layer_norm(x).tobytes()


def test_modulate_zero_input_gives_shift():
    c = rand(12, D)
    assert np.array_equal(dit.modulate(np.zeros((3, D), np.float32), c, np.zeros(D, np.float32)), np.tile(c, (3, 1)))


def test_modulate_matches_elementwise():
    x, mu, sig = rand(13, 4, D).astype(np.float64), rand(14, D).astype(np.float64), rand(15, D).astype(np.float64)
    assert np.max(np.abs(dit.modulate(x, mu, sig) - (ln_ref(x) * (1 + sig) + mu))) < 1e-12


def test_modulate_width_mismatch():
    with pytest.raises(DimensionError):
        dit.modulate(np.zeros((2, 4)), np.zeros(3), np.zeros(3))


def test_gated_residual_cases():
    x, br, g = rand(16, 4, D), rand(17, 4, D), rand(18, D)
    assert np.array_equal(dit.gated_residual(x, br, np.zeros(D, np.float32)), x)
    assert not dit.gated_residual(x, -x, np.ones(D, np.float32)).any()
    x64, br64, g64 = (a.astype(np.float64) for a in (x, br, g))
    assert np.max(np.abs(dit.gated_residual(x64, br64, g64) - (x64 + g64 * br64))) < 1e-15


# -- attention ----------------------------------------------------------------


def _sa_ref(h, w, l):
    b = f"base.blk{l}"
    q, k, v = h @ w[f"{b}.wq"], h @ w[f"{b}.wk"], h @ w[f"{b}.wv"]
    return softmax_ref(q @ k.T / np.sqrt(h.shape[1])) @ v @ w[f"{b}.wo"], q


def test_decoupled_attention_without_faces_is_self_attention(params):
    h = rand(19, 10, D)
    plain = dit.decoupled_attention_graph({k: tp.leaf(v) for k, v in params.items()}, 0, tp.leaf(h[None]), None,
                                          adapter=False).value[0]
    assert dit.decoupled_attention(h, np.zeros((0, D), np.float32), params, 0).tobytes() == plain.tobytes()
    assert dit.decoupled_attention(h, None, params, 0).tobytes() == plain.tobytes()


def test_single_token_attention_is_value_path(trained):
    w = as_float64(trained)
    h = rand(20, 1, D).astype(np.float64)
    out = dit.decoupled_attention(h, None, w, 1)
    assert np.max(np.abs(out - h @ w["base.blk1.wv"] @ w["base.blk1.wo"])) < 1e-12


def test_decoupled_attention_is_sum_of_terms(trained):
    w = as_float64(trained)
    h, face = rand(21, 10, D).astype(np.float64), rand(22, 32, D).astype(np.float64)
    sa, q = _sa_ref(h, w, 0)
    a = "adapter.blk0"
    ca = softmax_ref(q @ (face @ w[f"{a}.wk_hat"]).T / np.sqrt(D)) @ (face @ w[f"{a}.wv_hat"]) @ w[f"{a}.wo_ca"]
    out = dit.decoupled_attention(h, face, w, 0)
    assert np.max(np.abs(out - (sa + ca))) < 1e-6
    assert np.abs(ca).max() > 1e-3


def test_cross_attention_refused_on_odd_layer(params):
    with pytest.raises(ContractError):
        dit.decoupled_attention(rand(0, 4, D), rand(1, 32, D), params, 1)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.integers(1, 40), st.integers(0, 10**6))
def test_attention_rows_sum_to_one(n, m, seed):
    q = tp.leaf(rand(seed, 1, n, D) * 5)
    k = tp.leaf(rand(seed + 1, 1, m, D) * 5)
    rows = dit.attention_scores(q, k).value.astype(np.float64).sum(-1)
    assert np.all(np.abs(rows - 1) < 1e-6)


# -- blocks and the full model ------------------------------------------------


def test_block_zero_init_without_faces_equals_base_block(params):
    lay = dit.SequenceLayout(N_TXT, 8, 0)
    x, t = rand(23, N_TXT + 8, D), dit.time_embedding(4, params)
    base = dit.block_forward(x, None, t, 0, params, lay, machinery=None)
    full = dit.block_forward(x, rand(24, 2, D), t, 0, params, lay)
    assert full.tobytes() == base.tobytes()


@pytest.mark.parametrize("n_face", [0, 32])
@pytest.mark.parametrize("l", [0, 1])
def test_block_preserves_shape(params, n_face, l):
    lay = dit.SequenceLayout(N_TXT, 8, n_face)
    out = dit.block_forward(rand(25, lay.total, D), rand(26, 2, D), dit.time_embedding(1, params), l, params, lay)
    assert out.shape == (lay.total, D)


def test_block_layout_mismatch(params):
    with pytest.raises(DimensionError):
        dit.block_forward(rand(0, 5, D), None, dit.time_embedding(1, params), 0, params, dit.SequenceLayout(N_TXT, 8))


def test_block_input_gradient(trained):
    w = as_float64(trained)
    lay = dit.SequenceLayout(N_TXT, 4, 32)
    x0 = rand(27, lay.total, D).astype(np.float64)
    t = dit.time_embedding(6, w)
    x_id = rand(28, 1, 2, D).astype(np.float64)
    proj = rand(29, lay.total, D).astype(np.float64)

    def run(x, grad=False):
        P = {k: tp.leaf(v) for k, v in w.items()}
        xv = tp.leaf(x[None], requires_grad=grad)
        ctx = dit.id_context_graph(P, tp.leaf(x_id), 1, np.float64)
        out = dit.block_graph(P, 0, xv, tp.leaf(t[None]), lay, dit.Machinery(), ctx)
        return tp.sum_all(tp.mul(out, tp.leaf(proj[None]))), xv

    root, xv = run(x0, True)
    tp.backward(root)
    num = nm.finite_diff_grad(lambda x: float(run(x)[0].value), x0)
    ana = xv.grad[0]
    assert np.linalg.norm(ana - num) / np.linalg.norm(num) < 1e-3


def _inputs(cfg, seed):
    F, Pn, pp = cfg.frames, cfg.n_patches, cfg.patch_dim
    return rand(seed, F, Pn, pp), rand(seed + 1, N_TXT, cfg.d), rand(seed + 2, 32, cfg.d), rand(seed + 3, 2, cfg.d)


def test_model_forward_deterministic(params):
    x_vid, x_txt, x_face, x_id = _inputs(TINY, 30)
    a = dit.model_forward(x_vid, x_txt, x_face, x_id, 7, params, TINY)
    b = dit.model_forward(x_vid.copy(), x_txt.copy(), x_face.copy(), x_id.copy(), 7, params, TINY)
    assert a.shape == x_vid.shape and a.tobytes() == b.tobytes()


def test_unconditioned_model_equals_base_stack(params):
    x_vid, x_txt, _, x_id = _inputs(TINY, 31)
    a = dit.model_forward(x_vid, x_txt, None, x_id, 3, params, TINY)
    assert a.tobytes() == dit.base_forward(x_vid, x_txt, 3, params, TINY).tobytes()


def test_base_stack_never_reads_adapter(params):
    x_vid, x_txt, _, _ = _inputs(TINY, 32)
    stripped = {k: v for k, v in params.items() if not k.startswith("adapter.")}
    assert dit.base_forward(x_vid, x_txt, 3, stripped, TINY).tobytes() == \
        dit.base_forward(x_vid, x_txt, 3, params, TINY).tobytes()


def test_face_tokens_matter_once_adapters_train(trained):
    x_vid, x_txt, x_face, x_id = _inputs(TINY, 33)
    with_face = dit.model_forward(x_vid, x_txt, x_face, x_id, 3, trained, TINY)
    without = dit.model_forward(x_vid, x_txt, None, x_id, 3, trained, TINY)
    assert np.abs(with_face - without).max() > 1e-4


def test_wrong_face_token_count(params):
    x_vid, x_txt, x_face, x_id = _inputs(TINY, 34)
    with pytest.raises(DimensionError):
        dit.model_forward(x_vid, x_txt, x_face[:5], x_id, 3, params, TINY)


def test_disabled_face_branch_drops_face_tokens(trained):
    x_vid, x_txt, x_face, x_id = _inputs(TINY, 35)
    m = dit.Machinery(use_face=False)
    a = dit.model_forward(x_vid, x_txt, x_face, x_id, 3, trained, TINY, m)
    b = dit.model_forward(x_vid, x_txt, None, x_id, 3, trained, TINY, m)
    assert a.tobytes() == b.tobytes()


def test_disabled_id_branch_ignores_identity(trained):
    x_vid, x_txt, x_face, x_id = _inputs(TINY, 36)
    m = dit.Machinery(use_id=False)
    a = dit.model_forward(x_vid, x_txt, x_face, x_id, 3, trained, TINY, m)
    b = dit.model_forward(x_vid, x_txt, x_face, x_id * 2, 3, trained, TINY, m)
    assert a.tobytes() == b.tobytes()


def test_direct_can_replaces_base_factors(trained):
    P = {k: tp.leaf(v) for k, v in trained.items()}
    t_embed = dit.time_embedding_graph(P, [5], np.float32)
    lay = dit.SequenceLayout(N_TXT, 8, 0)
    ctx = dit.id_context_graph(P, tp.leaf(rand(37, 1, 2, D)), 1, np.float32)
    direct = dit.block_factors(P, 0, t_embed, lay, dit.Machinery(direct_can=True), ctx)
    hat_vid, _ = dit.can_graph(P, 0, t_embed, dit.modulation_graph(P, "base.blk0.phi_vid", t_embed, 0).mu1, ctx)
    assert np.array_equal(direct["vid"].sigma2.value, hat_vid.sigma2.value)
