"""Multimodal DiT stack with facial adapters.

The sequence is ``[txt | vid | face]``. Every block normalises each modality
span with its own adaptive factors, runs one shared-query attention over the
whole sequence plus a cross-attention onto the face span, and closes with a
per-span gated FFN. Adapter machinery (face modulation, conditioned residual
factors, decoupled cross-attention) lives on even-index blocks only.

Graph functions take batched :class:`idadapt._tape.Var` inputs and are what
training differentiates; the array functions at the bottom wrap them for
single samples.
"""

from dataclasses import dataclass

import numpy as np

from . import _tape as tp
from . import numerics as nm
from .errors import ContractError, DimensionError

FACTOR_NAMES = ("mu1", "sigma1", "gamma1", "mu2", "sigma2", "gamma2")


@dataclass(frozen=True)
class SequenceLayout:
    n_txt: int
    n_vid: int
    n_face: int = 0

    def __post_init__(self):
        if self.n_txt < 1 or self.n_vid < 1 or self.n_face < 0:
            raise DimensionError(f"bad layout {self}")

    @property
    def total(self):
        return self.n_txt + self.n_vid + self.n_face

    @property
    def txt(self):
        return (0, self.n_txt)

    @property
    def vid(self):
        return (self.n_txt, self.n_txt + self.n_vid)

    @property
    def face(self):
        return (self.n_txt + self.n_vid, self.total)

    def spans(self):
        out = [("txt", self.txt), ("vid", self.vid)]
        if self.n_face:
            out.append(("face", self.face))
        return out


@dataclass
class ModulationFactors:
    mu1: object
    sigma1: object
    gamma1: object
    mu2: object
    sigma2: object
    gamma2: object

    def as_tuple(self):
        return tuple(getattr(self, n) for n in FACTOR_NAMES)

    def values(self):
        """Plain arrays, for factors built from graph nodes."""
        return ModulationFactors(*(f.value if isinstance(f, tp.Var) else f for f in self.as_tuple()))


@dataclass(frozen=True)
class Machinery:
    """Which parts of the facial adapter run. ``None`` in place of this means none."""

    use_face: bool = True
    use_id: bool = True
    use_can: bool = True
    direct_can: bool = False

    @classmethod
    def from_config(cls, cfg):
        return cls(
            use_face=not cfg.disable_face_branch,
            use_id=not cfg.disable_id_branch,
            use_can=not cfg.disable_can,
            direct_can=cfg.direct_can_prediction,
        )


# -- parameters ---------------------------------------------------------------


def _dense(rng, n_in, n_out, gain=1.0):
    w, rng = nm.seeded_normal(rng, (n_in, n_out))
    return (w * np.float32(gain / np.sqrt(n_in))).astype(np.float32), rng


def _predictor(p, rng, prefix, n_in, d, n_out, zero_out):
    p[f"{prefix}.w1"], rng = _dense(rng, n_in, d)
    p[f"{prefix}.b1"] = np.zeros(d, np.float32)
    if zero_out:
        p[f"{prefix}.w2"] = np.zeros((d, n_out), np.float32)
    else:
        p[f"{prefix}.w2"], rng = _dense(rng, d, n_out, gain=0.1)
    p[f"{prefix}.b2"] = np.zeros(n_out, np.float32)
    return rng


def init_base_params(cfg, rng, n_txt):
    """Base stack parameters (``base.*``)."""
    d, dt, pp = cfg.d, cfg.d_t, cfg.patch_dim
    hidden = cfg.ffn_mult * d
    p = {}
    p["base.patch_in.w"], rng = _dense(rng, pp, d)
    p["base.patch_in.b"] = np.zeros(d, np.float32)
    p["base.txt_in.w"], rng = _dense(rng, d, d)
    p["base.txt_in.b"] = np.zeros(d, np.float32)
    for name, n in (("pos_space", cfg.n_patches), ("pos_time", cfg.frames), ("pos_txt", n_txt)):
        w, rng = nm.seeded_normal(rng, (n, d))
        p[f"base.{name}"] = w * np.float32(0.1)
    p["base.time.w1"], rng = _dense(rng, dt, dt)
    p["base.time.b1"] = np.zeros(dt, np.float32)
    p["base.time.w2"], rng = _dense(rng, dt, dt)
    p["base.time.b2"] = np.zeros(dt, np.float32)
    p["base.layer_emb"], rng = nm.seeded_normal(rng, (cfg.n_blocks, dt))
    for l in range(cfg.n_blocks):
        b = f"base.blk{l}"
        for name in ("wq", "wk", "wv", "wo"):
            p[f"{b}.{name}"], rng = _dense(rng, d, d)
        p[f"{b}.ff1.w"], rng = _dense(rng, d, hidden)
        p[f"{b}.ff1.b"] = np.zeros(hidden, np.float32)
        p[f"{b}.ff2.w"], rng = _dense(rng, hidden, d)
        p[f"{b}.ff2.b"] = np.zeros(d, np.float32)
        rng = _predictor(p, rng, f"{b}.phi_txt", 2 * dt, d, 6 * d, zero_out=False)
        rng = _predictor(p, rng, f"{b}.phi_vid", 2 * dt, d, 6 * d, zero_out=False)
    p["base.final.w"], rng = _dense(rng, dt, 2 * d, gain=0.1)
    p["base.final.b"] = np.zeros(2 * d, np.float32)
    p["base.out.w"], rng = _dense(rng, d, pp)
    p["base.out.b"] = np.zeros(pp, np.float32)
    return p


def init_adapter_params(cfg, rng):
    """Adapter parameters (``adapter.*``). Every output layer starts at zero."""
    d, dt = cfg.d, cfg.d_t
    p = {}
    p["adapter.face_in.w"], rng = _dense(rng, d, d)
    p["adapter.face_in.b"] = np.zeros(d, np.float32)
    w, rng = nm.seeded_normal(rng, (cfg.n_face_tokens, d))
    p["adapter.pos_face"] = w * np.float32(0.1)
    p["adapter.id_global.w"], rng = _dense(rng, 2 * d, cfg.c1)
    p["adapter.id_global.b"] = np.zeros(cfg.c1, np.float32)
    for l in cfg.adapter_layers():
        b = f"adapter.blk{l}"
        rng = _predictor(p, rng, f"{b}.phi_face", 2 * dt, d, 6 * d, zero_out=True)
        rng = _predictor(p, rng, f"{b}.phi_cond", cfg.c1 + dt + d, d, 12 * d, zero_out=True)
        p[f"{b}.wk_hat"], rng = _dense(rng, d, d)
        p[f"{b}.wv_hat"], rng = _dense(rng, d, d)
        p[f"{b}.wo_ca"] = np.zeros((d, d), np.float32)
    return p


# -- graph pieces -------------------------------------------------------------


def sinusoid(t, width):
    """Sinusoidal features ``[B, width]`` of integer timesteps ``t[B]``."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = width // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None]
    out = np.concatenate([np.cos(ang), np.sin(ang)], axis=1)
    if width % 2:
        out = np.concatenate([out, np.zeros((t.size, 1))], axis=1)
    return out


def time_embedding_graph(P, t, dtype):
    feats = tp.leaf(sinusoid(t, P["base.time.w1"].value.shape[0]).astype(dtype))
    h = tp.silu(tp.linear(feats, P["base.time.w1"], P["base.time.b1"]))
    return tp.linear(h, P["base.time.w2"], P["base.time.b2"])


def _split6(out, d, offset=0):
    return ModulationFactors(*(tp.take(out, 1, offset + i * d, offset + (i + 1) * d) for i in range(6)))


def _layer_input(P, t_embed, l):
    B = t_embed.value.shape[0]
    lemb = tp.take(P["base.layer_emb"], 0, l, l + 1)  # [1, d_t]
    lemb = tp.reshape(tp.tile(lemb, B), (B, -1))
    return tp.concat([t_embed, lemb], axis=1)


def predictor_graph(P, prefix, inp):
    h = tp.silu(tp.linear(inp, P[f"{prefix}.w1"], P[f"{prefix}.b1"]))
    return tp.linear(h, P[f"{prefix}.w2"], P[f"{prefix}.b2"])


def modulation_graph(P, prefix, t_embed, l):
    out = predictor_graph(P, prefix, _layer_input(P, t_embed, l))
    return _split6(out, out.value.shape[1] // 6)


def can_graph(P, l, t_embed, mu1_vid, id_ctx):
    """Conditioned residual factors ``(m_hat_vid, m_hat_txt)`` for adapter block ``l``."""
    inp = tp.concat([id_ctx, t_embed, mu1_vid], axis=1)
    out = predictor_graph(P, f"adapter.blk{l}.phi_cond", inp)
    d = out.value.shape[1] // 12
    return _split6(out, d, 0), _split6(out, d, 6 * d)


def _add_factors(a, b):
    return ModulationFactors(*(tp.add(x, y) for x, y in zip(a.as_tuple(), b.as_tuple())))


def id_context_graph(P, x_id, B, dtype):
    """Global projection of the identity tokens to width ``c1``."""
    if x_id is None:
        flat = tp.leaf(np.zeros((B, P["adapter.id_global.w"].value.shape[0]), dtype))
    else:
        flat = tp.reshape(x_id, (B, -1))
    return tp.linear(flat, P["adapter.id_global.w"], P["adapter.id_global.b"])


def attention_scores(q, k):
    d = q.value.shape[-1]
    return tp.softmax(tp.scale(tp.bmm_nt(q, k), 1.0 / np.sqrt(d)))


def decoupled_attention_graph(P, l, h, face, adapter):
    """``wo(T_SA) + wo_ca(T_CA)`` with one query projection shared by both terms.

    ``face`` is the (normalised) face span used as the cross-attention
    context, or ``None`` to run self-attention only.
    """
    b = f"base.blk{l}"
    q = tp.linear(h, P[f"{b}.wq"])
    sa = tp.bmm(attention_scores(q, tp.linear(h, P[f"{b}.wk"])), tp.linear(h, P[f"{b}.wv"]))
    out = tp.linear(sa, P[f"{b}.wo"])
    if adapter and face is not None:
        a = f"adapter.blk{l}"
        ca = tp.bmm(attention_scores(q, tp.linear(face, P[f"{a}.wk_hat"])), tp.linear(face, P[f"{a}.wv_hat"]))
        out = tp.add(out, tp.linear(ca, P[f"{a}.wo_ca"]))
    return out


def _ffn(P, l, x):
    b = f"base.blk{l}"
    h = tp.gelu(tp.linear(x, P[f"{b}.ff1.w"], P[f"{b}.ff1.b"]))
    return tp.linear(h, P[f"{b}.ff2.w"], P[f"{b}.ff2.b"])


def _modulated_spans(x, layout, factors, which):
    mu, sigma = ("mu1", "sigma1") if which == 1 else ("mu2", "sigma2")
    parts = []
    for name, (lo, hi) in layout.spans():
        m = factors[name]
        parts.append(tp.modulate(tp.layer_norm(tp.take(x, 1, lo, hi)), getattr(m, mu), getattr(m, sigma)))
    return parts


def _gated_spans(x, branch, layout, factors, gate):
    parts = []
    for name, (lo, hi) in layout.spans():
        parts.append(tp.gated_residual(tp.take(x, 1, lo, hi), tp.take(branch, 1, lo, hi),
                                       getattr(factors[name], gate)))
    return tp.concat(parts, axis=1) if len(parts) > 1 else parts[0]


def block_factors(P, l, t_embed, layout, machinery, id_ctx):
    """Per-span factors for block ``l``: ``{"txt", "vid", "face"} -> ModulationFactors``."""
    b = f"base.blk{l}"
    m_txt = modulation_graph(P, f"{b}.phi_txt", t_embed, l)
    m_vid = modulation_graph(P, f"{b}.phi_vid", t_embed, l)
    adapter = machinery is not None and l % 2 == 0
    if adapter and machinery.use_can:
        hat_vid, hat_txt = can_graph(P, l, t_embed, m_vid.mu1, id_ctx)
        if machinery.direct_can:
            m_vid, m_txt = hat_vid, hat_txt
        else:
            m_vid, m_txt = _add_factors(m_vid, hat_vid), _add_factors(m_txt, hat_txt)
    factors = {"txt": m_txt, "vid": m_vid}
    if layout.n_face:
        factors["face"] = modulation_graph(P, f"adapter.blk{l}.phi_face", t_embed, l) if adapter else m_vid
    return factors


def block_graph(P, l, x, t_embed, layout, machinery=None, id_ctx=None):
    """One block on ``x[B, N, d]``. ``machinery=None`` is the plain base block."""
    if x.value.shape[1] != layout.total:
        raise DimensionError(f"sequence of {x.value.shape[1]} tokens for layout {layout}")
    if machinery is None and layout.n_face:
        raise DimensionError("face tokens need the adapter machinery")
    adapter = machinery is not None and l % 2 == 0
    factors = block_factors(P, l, t_embed, layout, machinery, id_ctx)
    parts = _modulated_spans(x, layout, factors, 1)
    h = tp.concat(parts, axis=1)
    face = parts[2] if layout.n_face else None
    attn = decoupled_attention_graph(P, l, h, face, adapter)
    x = _gated_spans(x, attn, layout, factors, "gamma1")
    h = tp.concat(_modulated_spans(x, layout, factors, 2), axis=1)
    return _gated_spans(x, _ffn(P, l, h), layout, factors, "gamma2")


def _embed_video(P, x_vid, cfg):
    B, F, Pn, pp = x_vid.value.shape
    if Pn != cfg.n_patches or pp != cfg.patch_dim or F > cfg.frames:
        raise DimensionError(f"video latent {x_vid.value.shape} does not fit the configuration")
    tok = tp.linear(x_vid, P["base.patch_in.w"], P["base.patch_in.b"])  # [B, F, P, d]
    pos_t = tp.take(P["base.pos_time"], 0, 0, F)
    pos = tp.add(tp.tile(P["base.pos_space"], F), tp.reshape(tp.repeat_tokens(pos_t, Pn), (F, Pn, -1)))
    tok = tp.add_rows(tok, pos)
    return tp.reshape(tok, (B, F * Pn, -1))


def _embed_text(P, x_txt):
    n = x_txt.value.shape[1]
    if n != P["base.pos_txt"].value.shape[0]:
        raise DimensionError(f"{n} text tokens, positions exist for {P['base.pos_txt'].value.shape[0]}")
    return tp.add_rows(tp.linear(x_txt, P["base.txt_in.w"], P["base.txt_in.b"]), P["base.pos_txt"])


def _embed_face(P, x_face):
    return tp.add_rows(tp.linear(x_face, P["adapter.face_in.w"], P["adapter.face_in.b"]), P["adapter.pos_face"])


def _readout(P, x, layout, t_embed, shape):
    lo, hi = layout.vid
    v = tp.layer_norm(tp.take(x, 1, lo, hi))
    mod = tp.linear(tp.silu(t_embed), P["base.final.w"], P["base.final.b"])
    d = v.value.shape[-1]
    v = tp.modulate(v, tp.take(mod, 1, 0, d), tp.take(mod, 1, d, 2 * d))
    return tp.reshape(tp.linear(v, P["base.out.w"], P["base.out.b"]), shape)


def base_forward_graph(P, cfg, x_vid, t, x_txt):
    """The stack with no facial machinery at all; never reads ``adapter.*``."""
    vid = _embed_video(P, x_vid, cfg)
    txt = _embed_text(P, x_txt)
    layout = SequenceLayout(txt.value.shape[1], vid.value.shape[1], 0)
    t_embed = time_embedding_graph(P, t, x_vid.value.dtype)
    x = tp.concat([txt, vid], axis=1)
    for l in range(cfg.n_blocks):
        x = block_graph(P, l, x, t_embed, layout)
    return _readout(P, x, layout, t_embed, x_vid.value.shape)


def forward_graph(P, cfg, x_vid, t, x_txt, x_face=None, x_id=None, machinery=Machinery()):
    """Noise prediction shaped like ``x_vid[B, F, P, patch_dim]``.

    ``x_face`` (``[B, n_face, d]``) is dropped when the face branch is off;
    ``x_id`` (``[B, 2, d]``) feeds the conditioned residual factors.
    """
    if machinery is None:
        return base_forward_graph(P, cfg, x_vid, t, x_txt)
    B = x_vid.value.shape[0]
    vid = _embed_video(P, x_vid, cfg)
    txt = _embed_text(P, x_txt)
    parts = [txt, vid]
    n_face = 0
    if machinery.use_face and x_face is not None:
        n_face = x_face.value.shape[1]
        if n_face not in (0, cfg.n_face_tokens):
            raise DimensionError(f"{n_face} face tokens, expected 0 or {cfg.n_face_tokens}")
        if n_face:
            parts.append(_embed_face(P, x_face))
    layout = SequenceLayout(txt.value.shape[1], vid.value.shape[1], n_face)
    t_embed = time_embedding_graph(P, t, x_vid.value.dtype)
    id_ctx = None
    if machinery.use_can:
        id_ctx = id_context_graph(P, x_id if machinery.use_id else None, B, x_vid.value.dtype)
    x = tp.concat(parts, axis=1)
    for l in range(cfg.n_blocks):
        x = block_graph(P, l, x, t_embed, layout, machinery, id_ctx)
    return _readout(P, x, layout, t_embed, x_vid.value.shape)


# -- single-sample array API --------------------------------------------------


def _vars(params):
    return {k: tp.leaf(v) for k, v in params.items()}


def _one(x):
    return tp.leaf(np.asarray(x)[None])


def time_embedding(t, params):
    """Time embedding ``[d_t]`` of one integer timestep."""
    P = _vars(params)
    dtype = params["base.time.w1"].dtype
    return time_embedding_graph(P, [t], dtype).value[0]


def _check_layer(params, l):
    n = params["base.layer_emb"].shape[0]
    if not 0 <= l < n:
        raise DimensionError(f"layer {l} outside a {n}-block stack")


def modulation_base(t_embed, l, params, predictor="phi_vid"):
    """Factors of one predictor at layer ``l``: ``phi_txt``, ``phi_vid`` or ``phi_face``."""
    _check_layer(params, l)
    if predictor == "phi_face":
        if l % 2:
            raise ContractError(f"layer {l} carries no face predictor")
        prefix = f"adapter.blk{l}.phi_face"
    elif predictor in ("phi_txt", "phi_vid"):
        prefix = f"base.blk{l}.{predictor}"
    else:
        raise ValueError(f"unknown predictor {predictor!r}")
    m = modulation_graph(_vars(params), prefix, _one(t_embed), l)
    return ModulationFactors(*(f.value[0] for f in m.as_tuple()))


def can_residual(t_embed, l, mu1_vid, x_id, params):
    """Conditioned residual factors ``(m_hat_vid, m_hat_txt)`` on adapter layer ``l``."""
    _check_layer(params, l)
    if l % 2:
        raise ContractError(f"conditioned residual requested on non-adapter layer {l}")
    P = _vars(params)
    id_ctx = id_context_graph(P, None if x_id is None else _one(x_id), 1, params["adapter.id_global.w"].dtype)
    hat_vid, hat_txt = can_graph(P, l, _one(t_embed), _one(mu1_vid), id_ctx)
    unpack = lambda m: ModulationFactors(*(f.value[0] for f in m.as_tuple()))
    return unpack(hat_vid), unpack(hat_txt)


def modulate(x, mu, sigma):
    """``layer_norm(x) * (1 + sigma) + mu``."""
    x = np.asarray(x)
    mu = np.asarray(mu, dtype=x.dtype)
    sigma = np.asarray(sigma, dtype=x.dtype)
    if mu.shape != (x.shape[-1],) or sigma.shape != mu.shape:
        raise DimensionError(f"modulate: factors {mu.shape}/{sigma.shape} for tokens {x.shape}")
    return tp.modulate(tp.leaf(nm.layer_norm(x)[None]), _one(mu), _one(sigma)).value[0]


def gated_residual(x, branch_out, gamma):
    """``x + gamma * branch_out``."""
    x = np.asarray(x)
    return tp.gated_residual(_one(x), _one(np.asarray(branch_out, x.dtype)), _one(np.asarray(gamma, x.dtype))).value[0]


def decoupled_attention(x_full, x_face, params, l):
    """Attention output ``[N, d]`` of block ``l`` for a normalised sequence.

    ``x_face`` is the cross-attention context (``None`` or zero rows for none).
    """
    _check_layer(params, l)
    x_full = np.asarray(x_full)
    face = None
    if x_face is not None and np.asarray(x_face).shape[0]:
        if l % 2:
            raise ContractError(f"cross-attention requested on non-adapter layer {l}")
        face = _one(x_face)
    return decoupled_attention_graph(_vars(params), l, _one(x_full), face, l % 2 == 0).value[0]


def block_forward(x_full, x_id, t_embed, l, params, layout, machinery=Machinery()):
    """One block on a single sequence ``[N, d]``."""
    _check_layer(params, l)
    P = _vars(params)
    id_ctx = None
    if machinery is not None and machinery.use_can:
        dtype = np.asarray(x_full).dtype
        id_ctx = id_context_graph(P, None if x_id is None or not machinery.use_id else _one(x_id), 1, dtype)
    return block_graph(P, l, _one(x_full), _one(t_embed), layout, machinery, id_ctx).value[0]


def model_forward(x_vid, x_txt, x_face, x_id, t, params, cfg, machinery=Machinery()):
    """Noise prediction ``[F, P, patch_dim]`` for one noisy latent clip."""
    P = _vars(params)
    face = None if x_face is None else _one(x_face)
    xid = None if x_id is None else _one(x_id)
    return forward_graph(P, cfg, _one(x_vid), [t], _one(x_txt), face, xid, machinery).value[0]


def base_forward(x_vid, x_txt, t, params, cfg):
    """Noise prediction of the bare stack, for one clip."""
    return base_forward_graph(_vars(params), cfg, _one(x_vid), [t], _one(x_txt)).value[0]
