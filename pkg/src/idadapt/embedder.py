"""Dual-branch facial embedding.

From one reference image the embedder produces the facial condition: 32
structural tokens from a learnable query attending to dense patch features,
and two identity tokens refined by a second perceiver starting from the
recognition embedding. The identity tokens are spliced into the text
sequence through a fusion MLP at masked subject positions only.

Feature extractors are fixed seeded linear maps (the pretrained encoders they
stand in for are frozen anyway); both ignore the constant component of an
image, so a uniform image maps to zero.
"""

from dataclasses import dataclass

import numpy as np

from . import _tape as tp
from . import numerics as nm
from .errors import DimensionError

N_ID_TOKENS = 2


@dataclass(frozen=True)
class TokenMask:
    bits: tuple

    def __post_init__(self):
        if any(b not in (0, 1) for b in self.bits):
            raise ValueError("mask bits must be 0 or 1")

    @classmethod
    def single(cls, n, index):
        return cls(tuple(int(i == index) for i in range(n)))

    @property
    def array(self):
        return np.array(self.bits, dtype=bool)

    def __len__(self):
        return len(self.bits)


@dataclass
class FaceCondition:
    x_face: np.ndarray  # [32, d] structural tokens
    x_id: np.ndarray  # [2, d] identity tokens
    x_txt_fused: np.ndarray  # [n_txt, d] text with identity spliced in
    mask: TokenMask


# -- parameter construction ---------------------------------------------------


def _centered_projection(rng, n_in, n_out, std):
    w, rng = nm.normals(rng, n_in * n_out)
    w = w.reshape(n_in, n_out) * std
    w -= w.mean(axis=0, keepdims=True)
    return w.astype(np.float32), rng


def _dense(rng, n_in, n_out):
    w, rng = nm.seeded_normal(rng, (n_in, n_out))
    return (w / np.float32(np.sqrt(n_in))).astype(np.float32), rng


def _perceiver_params(rng, prefix, d, depth, hidden, zero_out=True):
    out = {}
    for j in range(depth):
        p = f"{prefix}.blk{j}"
        for name in ("wq", "wk", "wv"):
            out[f"{p}.{name}"], rng = _dense(rng, d, d)
        out[f"{p}.ff1.w"], rng = _dense(rng, d, hidden)
        out[f"{p}.ff1.b"] = np.zeros(hidden, np.float32)
        if zero_out:
            out[f"{p}.wo"] = np.zeros((d, d), np.float32)
            out[f"{p}.ff2.w"] = np.zeros((hidden, d), np.float32)
        else:
            out[f"{p}.wo"], rng = _dense(rng, d, d)
            out[f"{p}.ff2.w"], rng = _dense(rng, hidden, d)
        out[f"{p}.ff2.b"] = np.zeros(d, np.float32)
    return out, rng


def init_params(cfg, rng):
    """Embedder parameters, all under the ``embed.`` prefix."""
    d = cfg.d
    n_pix = cfg.height * cfg.width
    p = {}
    p["embed.feat_proj"], rng = _centered_projection(rng.substream("feat"), cfg.patch_dim, d,
                                                     4.0 / np.sqrt(cfg.patch_dim))
    p["embed.id_proj"], rng = _centered_projection(rng.substream("id"), n_pix, N_ID_TOKENS * d,
                                                   6.0 / np.sqrt(n_pix))
    r = rng.substream("trainable")
    p["embed.face_query"], r = nm.seeded_normal(r, (cfg.n_face_tokens, d))
    perc, r = _perceiver_params(r, "embed.perc_id", d, cfg.perceiver_depth, 2 * d)
    p.update(perc)
    perc, r = _perceiver_params(r, "embed.perc_face", d, cfg.perceiver_depth, 2 * d)
    p.update(perc)
    p["embed.fuse.w1"], r = _dense(r, 2 * d, 2 * d)
    p["embed.fuse.b1"] = np.zeros(2 * d, np.float32)
    p["embed.fuse.w2"], r = _dense(r, 2 * d, d)
    p["embed.fuse.b2"] = np.zeros(d, np.float32)
    return p


# -- fixed extractors ---------------------------------------------------------


def patchify(images, patch):
    """``[..., H, W]`` -> ``[..., P, patch*patch]`` with row-major patch order."""
    *lead, H, W = images.shape
    if H % patch or W % patch:
        raise DimensionError(f"image {H}x{W} is not divisible into {patch}x{patch} patches")
    gh, gw = H // patch, W // patch
    x = images.reshape(*lead, gh, patch, gw, patch)
    x = np.moveaxis(x, -3, -2)  # [..., gh, gw, patch, patch]
    return np.ascontiguousarray(x.reshape(*lead, gh * gw, patch * patch))


def unpatchify(tokens, patch, height, width):
    *lead, P, pp = tokens.shape
    gh, gw = height // patch, width // patch
    if P != gh * gw or pp != patch * patch:
        raise DimensionError(f"tokens {tokens.shape} do not tile a {height}x{width} frame")
    x = tokens.reshape(*lead, gh, gw, patch, patch)
    x = np.moveaxis(x, -2, -3)
    return np.ascontiguousarray(x.reshape(*lead, height, width))


def extract_features(r, p, patch=4):
    """Dense patch features ``[P, d]`` of an image ``[H, W]``."""
    tokens = patchify(np.asarray(r, dtype=np.float32), patch)
    w = p["embed.feat_proj"]
    if tokens.shape[-1] != w.shape[0]:
        raise DimensionError(f"patch size {patch} does not match feat_proj {w.shape}")
    return nm.matmul(tokens.reshape(-1, tokens.shape[-1]), w).reshape(tokens.shape[:-1] + (w.shape[1],))


def encode_id(r, p):
    """Identity query tokens ``[2, d]``: the fixed recognition map, reshaped."""
    r = np.asarray(r, dtype=np.float32)
    w = p["embed.id_proj"]
    flat = r.reshape(-1, r.shape[-2] * r.shape[-1]) if r.ndim > 2 else r.reshape(1, -1)
    if flat.shape[1] != w.shape[0]:
        raise DimensionError(f"image with {flat.shape[1]} pixels does not match id_proj {w.shape}")
    out = nm.matmul(flat, w)
    lead = r.shape[:-2]
    return out.reshape(lead + (N_ID_TOKENS, w.shape[1] // N_ID_TOKENS))


def recognition_embedding(r, p):
    """Flat recognition embedding (the two identity tokens concatenated)."""
    q = encode_id(r, p)
    return q.reshape(q.shape[:-2] + (-1,))


# -- graph versions -----------------------------------------------------------


def attention(q, k, v):
    """Single-head scaled dot-product attention on ``[B, n, d]`` Vars."""
    d = q.value.shape[-1]
    scores = tp.scale(tp.bmm_nt(q, k), 1.0 / np.sqrt(d))
    return tp.bmm(tp.softmax(scores), v)


def perceiver_graph(queries, context, P, prefix, depth):
    """Queries ``[B, q, d]`` attend to context ``[B, P, d]`` through ``depth`` blocks.

    Each block: pre-normalised cross-attention, then a pre-normalised GELU
    FFN, both residual. Context tokens carry no positions.
    """
    if queries.value.shape[-1] != context.value.shape[-1]:
        raise DimensionError(
            f"perceiver: query width {queries.value.shape[-1]} != context width {context.value.shape[-1]}"
        )
    x = queries
    ctx_n = tp.layer_norm(context)
    for j in range(depth):
        b = f"{prefix}.blk{j}"
        h = tp.layer_norm(x)
        a = attention(tp.linear(h, P[f"{b}.wq"]), tp.linear(ctx_n, P[f"{b}.wk"]), tp.linear(ctx_n, P[f"{b}.wv"]))
        x = tp.add(x, tp.linear(a, P[f"{b}.wo"]))
        h = tp.gelu(tp.linear(tp.layer_norm(x), P[f"{b}.ff1.w"], P[f"{b}.ff1.b"]))
        x = tp.add(x, tp.linear(h, P[f"{b}.ff2.w"], P[f"{b}.ff2.b"]))
    return x


def fuse_id_text_graph(x_id, x_txt, mask, P):
    mask = mask if isinstance(mask, TokenMask) else TokenMask(tuple(int(b) for b in mask))
    B, n_txt, d = x_txt.value.shape
    if len(mask) != n_txt:
        raise DimensionError(f"mask of length {len(mask)} for {n_txt} text tokens")
    if not any(mask.bits):
        return x_txt
    pooled = tp.mean(x_id, axis=1)  # [B, d]
    rep = tp.repeat_tokens(pooled, n_txt)  # [B, n_txt, d]
    h = tp.gelu(tp.linear(tp.concat([rep, x_txt], axis=2), P["embed.fuse.w1"], P["embed.fuse.b1"]))
    fused = tp.linear(h, P["embed.fuse.w2"], P["embed.fuse.b2"])
    return tp.select_tokens(mask.array, fused, x_txt)


def condition_graph(P, ref_images, x_txt, mask, cfg, use_id=True, use_face=True):
    """Build the facial condition for a batch of reference images ``[B, H, W]``.

    Returns Vars ``(x_face or None, x_id or None, x_txt_hat)``.
    """
    feats = tp.leaf(extract_features(ref_images, _values(P), cfg.patch))
    x_face = None
    x_id = None
    x_hat = x_txt
    if use_face:
        B = ref_images.shape[0]
        q = tp.tile(P["embed.face_query"], B)
        x_face = perceiver_graph(q, feats, P, "embed.perc_face", cfg.perceiver_depth)
    if use_id:
        q_id = tp.leaf(encode_id(ref_images, _values(P)))
        x_id = perceiver_graph(q_id, feats, P, "embed.perc_id", cfg.perceiver_depth)
        x_hat = fuse_id_text_graph(x_id, x_txt, mask, P)
    return x_face, x_id, x_hat


class _Values:
    __slots__ = ("_P",)

    def __init__(self, P):
        self._P = P

    def __getitem__(self, key):
        v = self._P[key]
        return v.value if isinstance(v, tp.Var) else v


def _values(P):
    return _Values(P)


def _as_vars(p):
    return {k: tp.leaf(v) for k, v in p.items()}


# -- array-level public operations -----------------------------------------------


def perceiver_forward(queries, context, weights, prefix="embed.perc_face", depth=None):
    """Run a perceiver on single-sample arrays ``[q, d]`` and ``[P, d]``."""
    P = _as_vars(weights)
    if depth is None:
        depth = 1 + max(int(k[len(prefix) + 4:].split(".")[0]) for k in weights if k.startswith(prefix + ".blk"))
    q = tp.leaf(np.asarray(queries)[None])
    c = tp.leaf(np.asarray(context)[None])
    return perceiver_graph(q, c, P, prefix, depth).value[0]


def fuse_id_text(x_id, x_txt, mask, p):
    """Text tokens ``[n_txt, d]`` with fused identity at the masked positions."""
    x_txt = np.asarray(x_txt)
    if len(mask) != x_txt.shape[0]:
        raise DimensionError(f"mask of length {len(mask)} for {x_txt.shape[0]} text tokens")
    out = fuse_id_text_graph(tp.leaf(np.asarray(x_id)[None]), tp.leaf(x_txt[None]), mask, _as_vars(p))
    return out.value[0]


def embed_reference(r, x_txt, mask, p, cfg):
    """Full facial condition for one reference image."""
    P = _as_vars(p)
    x_face, x_id, x_hat = condition_graph(P, np.asarray(r, np.float32)[None], tp.leaf(np.asarray(x_txt)[None]),
                                          mask, cfg)
    return FaceCondition(x_face=x_face.value[0], x_id=x_id.value[0], x_txt_fused=x_hat.value[0],
                         mask=mask if isinstance(mask, TokenMask) else TokenMask(tuple(mask)))
