"""Noise schedule, latent codec, combined objective, training and sampling."""

from dataclasses import dataclass, field
import math

import numpy as np

from . import _tape as tp
from . import dit
from . import embedder as emb
from . import numerics as nm
from .dataforge import Tag, region_mask
from .errors import DegenerateInputError, DimensionError, NumericAbort

PIXEL_SCALE = 0.15

VOCAB = ("a", "photo", "video", "of", "adult", "elder", "youth", "child", "face")
PROMPT_LENGTH = 6
SUBJECT_INDEX = 4

STAGES = ("base", "image_pretrain", "video_finetune")


def prompt_tokens(tag, video):
    """Token ids of ``a photo|video of a <tag> face``."""
    words = ["a", "video" if video else "photo", "of", "a", Tag(tag).name.lower(), "face"]
    return np.array([VOCAB.index(w) for w in words], dtype=np.int64)


def subject_mask():
    return emb.TokenMask.single(PROMPT_LENGTH, SUBJECT_INDEX)


# -- schedule -----------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # float64 [T]
    timesteps: np.ndarray  # model timestep of each entry

    def __post_init__(self):
        b = self.betas
        if b.ndim != 1 or b.size == 0 or not np.all((b > 0) & (b < 1)):
            raise ValueError("betas must be a non-empty vector inside (0, 1)")
        if self.timesteps.shape != b.shape:
            raise ValueError("one model timestep per beta is required")

    @classmethod
    def linear(cls, T, beta_start, beta_end):
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        return cls(betas=betas, timesteps=np.arange(T))

    @classmethod
    def from_config(cls, cfg):
        return cls.linear(cfg.T, cfg.beta_start, cfg.beta_end)

    @property
    def T(self):
        return self.betas.size

    @property
    def alphas(self):
        return 1.0 - self.betas

    @property
    def alpha_bars(self):
        return np.cumprod(self.alphas)

    def posterior_variance(self):
        """``beta_tilde_t``; the entry for ``t = 0`` is zero."""
        ab = self.alpha_bars
        prev = np.concatenate([[1.0], ab[:-1]])
        return self.betas * (1.0 - prev) / (1.0 - ab)

    def respace(self, n):
        """A shorter chain over ``n`` evenly spaced timesteps with the same ``alpha_bar`` values."""
        if not 1 <= n <= self.T:
            raise ValueError(f"cannot respace {self.T} steps to {n}")
        idx = np.unique(np.round(np.linspace(0, self.T - 1, n)).astype(np.int64))
        ab = self.alpha_bars[idx]
        prev = np.concatenate([[1.0], ab[:-1]])
        return NoiseSchedule(betas=1.0 - ab / prev, timesteps=self.timesteps[idx])

    def check_t(self, t):
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t >= self.T):
            raise ValueError(f"timestep outside [0, {self.T})")


def _per_sample(coef, x):
    return np.asarray(coef, dtype=np.float64).reshape((-1,) + (1,) * (np.ndim(x) - 1))


def forward_noise(x0, t, eps, schedule):
    """``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``; ``t`` is a scalar or one index per leading item."""
    schedule.check_t(t)
    x0 = np.asarray(x0)
    eps = np.asarray(eps, dtype=x0.dtype)
    if eps.shape != x0.shape:
        raise DimensionError(f"noise {eps.shape} does not match data {x0.shape}")
    ab = schedule.alpha_bars[np.asarray(t)]
    if np.ndim(t):
        ab = _per_sample(ab, x0)
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(x0.dtype)


def reconstruct_x0(x_t, eps_hat, t, schedule):
    """Invert :func:`forward_noise` given a noise estimate."""
    schedule.check_t(t)
    x_t = np.asarray(x_t)
    ab = schedule.alpha_bars[np.asarray(t)]
    if np.ndim(t):
        ab = _per_sample(ab, x_t)
    return ((x_t - np.sqrt(1.0 - ab) * np.asarray(eps_hat)) / np.sqrt(ab)).astype(x_t.dtype)


# -- latent codec -------------------------------------------------------------


@dataclass(frozen=True)
class LatentCodec:
    """Per-patch orthogonal map between pixel frames and latent tokens."""

    q: np.ndarray  # [patch_dim, patch_dim], orthogonal
    patch: int
    height: int
    width: int

    @classmethod
    def from_rng(cls, rng, cfg):
        g, _ = nm.normals(rng, cfg.patch_dim * cfg.patch_dim)
        q, r = np.linalg.qr(g.reshape(cfg.patch_dim, cfg.patch_dim))
        q = q * np.sign(np.diag(r))[None, :]
        return cls(q=q.astype(np.float32), patch=cfg.patch, height=cfg.height, width=cfg.width)

    def encode(self, pixels):
        """``[..., H, W]`` pixels -> ``[..., P, patch_dim]`` latents."""
        x = (np.asarray(pixels, np.float32) - np.float32(0.5)) / np.float32(PIXEL_SCALE)
        tok = emb.patchify(x, self.patch)
        return nm.matmul(tok.reshape(-1, tok.shape[-1]), self.q).reshape(tok.shape)

    def decode(self, latent):
        """The fixed decoder: ``[..., P, patch_dim]`` latents -> ``[..., H, W]`` pixels."""
        latent = np.asarray(latent, np.float32)
        tok = nm.matmul_nt(latent.reshape(-1, latent.shape[-1]), self.q).reshape(latent.shape)
        return emb.unpatchify(tok, self.patch, self.height, self.width) * np.float32(PIXEL_SCALE) + np.float32(0.5)

    def latent_mask(self, pixel_mask):
        """Mark every latent of a patch that touches the pixel mask."""
        tok = emb.patchify(np.asarray(pixel_mask, np.float32), self.patch)
        hit = tok.max(axis=-1, keepdims=True) > 0
        return np.broadcast_to(hit, tok.shape).copy()

    def recognition_map(self, id_proj):
        """``(M, c)`` with ``recognition(decode(z)) = z_flat @ M + c`` per frame."""
        n = self.height * self.width
        # decode is linear in z up to the constant 0.5 frame: push the basis through it
        pp = self.q.shape[0]
        P = n // pp
        basis = np.eye(P * pp, dtype=np.float64).reshape(P * pp, P, pp)
        tok = basis @ self.q.T.astype(np.float64)
        pix = emb.unpatchify(tok, self.patch, self.height, self.width).reshape(P * pp, n)
        w = np.asarray(id_proj, np.float64)
        m = PIXEL_SCALE * pix @ w
        c = 0.5 * w.sum(axis=0)
        return m, c


# -- parameters and model -----------------------------------------------------


def init_params(cfg, seed_rng):
    """Every parameter of the system, keyed by dotted name."""
    p = {}
    p.update(dit.init_base_params(cfg, seed_rng.substream("base"), PROMPT_LENGTH))
    table, _ = nm.seeded_normal(seed_rng.substream("text"), (len(VOCAB), cfg.d))
    p["text.table"] = table
    p.update(emb.init_params(cfg, seed_rng.substream("embed")))
    p.update(dit.init_adapter_params(cfg, seed_rng.substream("adapter")))
    return p


_FACE_ONLY = ("embed.face_query", "embed.perc_face.", "adapter.face_in.", "adapter.pos_face",
              ".phi_face.", ".wk_hat", ".wv_hat", ".wo_ca")
_CAN_ONLY = ("adapter.id_global.", ".phi_cond.")
_ID_ONLY = ("embed.perc_id.", "embed.fuse.", "adapter.id_global.w")


def _matches(name, patterns):
    return any(name.startswith(p) if not p.startswith(".") else p in name for p in patterns)


def frozen_by_flags(name, cfg):
    """True if the ablation flags leave ``name`` at its initial value."""
    return ((cfg.disable_face_branch and _matches(name, _FACE_ONLY))
            or (cfg.disable_can and _matches(name, _CAN_ONLY))
            or (cfg.disable_id_branch and _matches(name, _ID_ONLY)))


def trainable_names(params, stage, cfg):
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    if stage == "base":
        return sorted(n for n in params if n.startswith("base."))
    adapter = ("adapter.", "embed.face_query", "embed.perc_", "embed.fuse.")
    return sorted(n for n in params if n.startswith(adapter) and not frozen_by_flags(n, cfg))


def machinery_for(stage, cfg):
    return None if stage == "base" else dit.Machinery.from_config(cfg)


# -- samples and batches ------------------------------------------------------


@dataclass
class TrainSample:
    x0: np.ndarray  # [F, H, W] pixels
    ref: np.ndarray  # [H, W]
    tokens: np.ndarray  # [n_txt] ids
    mask: emb.TokenMask
    face_regions: list  # one (x0, y0, x1, y1) per frame
    q_target: np.ndarray  # recognition embedding of ref

    def __post_init__(self):
        F, H, W = self.x0.shape
        if len(self.face_regions) != F:
            raise DimensionError(f"{len(self.face_regions)} face regions for {F} frames")
        for x0, y0, x1, y1 in self.face_regions:
            if not (0 <= x0 <= x1 <= W and 0 <= y0 <= y1 <= H):
                raise ValueError(f"face region {(x0, y0, x1, y1)} outside a {W}x{H} frame")


def sample_from_record(rec, tag, params):
    frames = np.stack([f.pixels for f in rec.target])
    return TrainSample(
        x0=frames,
        ref=rec.ref.pixels,
        tokens=prompt_tokens(tag, video=len(rec.target) > 1),
        mask=subject_mask(),
        face_regions=[f.face_region for f in rec.target],
        q_target=emb.recognition_embedding(rec.ref.pixels, params),
    )


@dataclass
class Batch:
    x0: np.ndarray  # [B, F, P, pp] clean latents
    face_mask: np.ndarray  # [B, F, P, pp] bool
    ref: np.ndarray  # [B, H, W]
    tokens: np.ndarray  # [B, n_txt]
    mask: emb.TokenMask
    q_target: np.ndarray  # [B, 2d]

    @property
    def frames(self):
        return self.x0.shape[1]

    def __len__(self):
        return self.x0.shape[0]


def collate(samples, codec):
    if not samples:
        raise ValueError("empty batch")
    F = samples[0].x0.shape[0]
    if any(s.x0.shape[0] != F for s in samples):
        raise DimensionError("a batch must not mix frame counts")
    masks = []
    for s in samples:
        pm = np.stack([region_mask(r, codec.height, codec.width) for r in s.face_regions])
        masks.append(codec.latent_mask(pm))
    return Batch(
        x0=np.stack([codec.encode(s.x0) for s in samples]),
        face_mask=np.stack(masks),
        ref=np.stack([s.ref for s in samples]).astype(np.float32),
        tokens=np.stack([s.tokens for s in samples]),
        mask=samples[0].mask,
        q_target=np.stack([s.q_target for s in samples]).astype(np.float32),
    )


class BatchSource:
    """Seeded batches drawn with replacement; batch ``k`` depends only on (rng, k)."""

    def __init__(self, samples, batch_size, codec, rng):
        if not samples:
            raise ValueError("no samples to draw batches from")
        self.samples = samples
        self.batch_size = batch_size
        self.codec = codec
        self.rng = rng

    def indices(self, k):
        idx, _ = nm.integers(self.rng.substream(k), self.batch_size, len(self.samples))
        return idx

    def batch(self, k):
        return collate([self.samples[i] for i in self.indices(k)], self.codec)


# -- objective ----------------------------------------------------------------


@dataclass
class LossBreakdown:
    l_noise: float
    l_id: float
    lam: float
    total: float
    face_masked: bool
    n_masked: int = 0


@dataclass
class _Draws:
    t: np.ndarray
    eps: np.ndarray
    coin: np.ndarray


def draw_noise(rng, batch, schedule, face_mask_prob):
    """Timesteps, noise and face-mask coins for one batch."""
    B = len(batch)
    t, rng = nm.integers(rng.substream("t"), B, schedule.T)
    eps, _ = nm.seeded_normal(rng.substream("eps"), batch.x0.shape, batch.x0.dtype)
    u, _ = nm.uniforms(rng.substream("coin"), B)
    return _Draws(t=t, eps=eps, coin=u < face_mask_prob)


def _leaf_params(params, trainable):
    return {k: tp.leaf(v, requires_grad=k in trainable, name=k) for k, v in params.items()}


def predict_graph(P, cfg, batch, x_t, t, machinery):
    """Noise estimate for a batch of noisy latents ``x_t`` (a Var)."""
    x_txt = tp.leaf(P["text.table"].value[batch.tokens])
    if machinery is None:
        return dit.base_forward_graph(P, cfg, x_t, t, x_txt)
    x_face, x_id, x_hat = emb.condition_graph(P, batch.ref, x_txt, batch.mask, cfg,
                                              use_id=machinery.use_id, use_face=machinery.use_face)
    return dit.forward_graph(P, cfg, x_t, t, x_hat, x_face, x_id, machinery)


def loss_graph(P, cfg, batch, draws, schedule, codec, machinery, lam):
    """Build the scalar batch loss; returns ``(root Var, eps_hat Var, parts)``."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    steps = schedule.timesteps[draws.t]
    x_t = forward_noise(batch.x0, draws.t, draws.eps, schedule)
    eps_hat = predict_graph(P, cfg, batch, tp.leaf(x_t), steps, machinery)
    full = np.ones_like(batch.face_mask)
    mask = np.where(draws.coin[:, None, None, None], batch.face_mask, full)
    l_noise = tp.masked_mse(eps_hat, draws.eps, mask)  # [B]
    B, F = batch.x0.shape[:2]
    dtype = batch.x0.dtype
    if lam > 0:
        if np.any(np.linalg.norm(batch.q_target.astype(np.float64), axis=1) == 0):
            raise DegenerateInputError("reference recognition embedding has zero norm")
        ab = schedule.alpha_bars[draws.t]
        c_eps = -np.sqrt(1.0 - ab) / np.sqrt(ab)
        x0_hat = tp.add_const(tp.mul_const(eps_hat, _per_sample(c_eps, batch.x0)),
                              x_t / _per_sample(np.sqrt(ab), x_t))
        m, c = codec.recognition_map(P["embed.id_proj"].value)
        rec = tp.add_const(tp.linear(tp.reshape(x0_hat, (B * F, -1)), tp.leaf(m.astype(dtype))),
                           c.astype(dtype))
        if np.any(np.linalg.norm(rec.value.astype(np.float64), axis=1) == 0):
            raise DegenerateInputError("decoded prediction has zero recognition embedding")
        cos = tp.row_cosine(rec, np.repeat(batch.q_target, F, axis=0))
        l_id = tp.add_const(tp.scale(tp.mean(tp.reshape(cos, (B, F)), axis=1), -1.0), 1.0)
        per = tp.add(l_noise, tp.scale(l_id, lam))
    else:
        l_id = None
        per = l_noise
    root = tp.scale(tp.sum_all(per), 1.0 / B)
    return root, eps_hat, (l_noise, l_id)


def _breakdown(parts, lam, coin):
    l_noise, l_id = parts
    ln = float(np.mean(l_noise.value, dtype=np.float64))
    li = float(np.mean(l_id.value, dtype=np.float64)) if l_id is not None else 0.0
    return LossBreakdown(l_noise=ln, l_id=li, lam=float(lam), total=ln + lam * li,
                         face_masked=bool(np.any(coin)), n_masked=int(np.sum(coin)))


def loss_total(sample, model, schedule, rng, lam=0.1, face_mask_prob=0.5):
    """Combined loss of one :class:`TrainSample` under ``model``.

    ``model`` is a :class:`Model`; ``rng`` drives ``t``, the noise and the mask coin.
    """
    batch = collate([sample], model.codec)
    draws = draw_noise(rng, batch, schedule, face_mask_prob)
    P = _leaf_params(model.params, ())
    _, _, parts = loss_graph(P, model.cfg, batch, draws, schedule, model.codec, model.machinery, lam)
    return _breakdown(parts, lam, draws.coin)


@dataclass
class Model:
    cfg: object
    params: dict
    codec: LatentCodec
    machinery: object = None

    @classmethod
    def create(cls, cfg, rng, stage="image_pretrain"):
        """``rng`` is the run's root stream; everything comes from its ``init`` child."""
        init = rng.substream("init")
        params = init_params(cfg, init)
        codec = LatentCodec.from_rng(init.substream("codec"), cfg)
        return cls(cfg=cfg, params=params, codec=codec, machinery=machinery_for(stage, cfg))


# -- optimisation -------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float
    total_steps: int
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def current_lr(self):
        if self.total_steps <= 0:
            return self.lr
        frac = min(self.step / self.total_steps, 1.0)
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def adamw_update(params, grads, state):
    """One decoupled-weight-decay Adam step over the names in ``grads``. Returns new params."""
    lr = state.current_lr()
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    out = dict(params)
    for name, g in grads.items():
        g = g.astype(np.float64)
        m = state.m.get(name, 0.0) * b1 + (1 - b1) * g
        v = state.v.get(name, 0.0) * b2 + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        if lr == 0.0:
            continue
        w = params[name].astype(np.float64)
        w = w - lr * (m / c1) / (np.sqrt(v / c2) + state.eps) - lr * state.weight_decay * w
        out[name] = w.astype(params[name].dtype)
    return out


def train_step(params, batch, opt, stage, cfg, codec, schedule, rng, step=None):
    """One optimisation step. Returns ``(params, opt, LossBreakdown)``; base weights stay untouched
    outside the ``base`` stage."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    if stage == "image_pretrain" and batch.frames != 1:
        raise DimensionError(f"image pre-training needs single frames, got F={batch.frames}")
    step = opt.step if step is None else step
    trainable = trainable_names(params, stage, cfg)
    P = _leaf_params(params, set(trainable))
    lam = 0.0 if stage == "base" else cfg.lambda_id
    draws = draw_noise(rng, batch, schedule, 0.0 if stage == "base" else cfg.face_mask_prob)
    root, eps_hat, parts = loss_graph(P, cfg, batch, draws, schedule, codec, machinery_for(stage, cfg), lam)
    if not np.all(np.isfinite(eps_hat.value)):
        raise NumericAbort("non-finite noise prediction", tensor_name="eps_hat", step=step)
    if not np.isfinite(root.value):
        raise NumericAbort("non-finite loss", tensor_name="loss", step=step)
    tp.backward(root)
    grads = {}
    for name in trainable:
        g = P[name].grad
        if g is None:
            g = np.zeros_like(params[name])
        elif not np.all(np.isfinite(g)):
            raise NumericAbort("non-finite gradient", tensor_name=name, step=step)
        grads[name] = g
    params = adamw_update(params, grads, opt)
    return params, opt, _breakdown(parts, lam, draws.coin)


# -- sampling -----------------------------------------------------------------


def sample_loop(model, batch, schedule, rng, shape=None):
    """Ancestral sampling from pure noise; returns clean latents ``[B, F, P, pp]``.

    ``batch`` carries the conditions (reference, tokens, mask); its ``x0`` is
    only used for the shape when ``shape`` is not given.
    """
    shape = tuple(batch.x0.shape) if shape is None else tuple(shape)
    x, rng = nm.seeded_normal(rng.substream("init"), shape)
    ab = schedule.alpha_bars
    var = schedule.posterior_variance()
    P = _leaf_params(model.params, ())
    for i in range(schedule.T - 1, -1, -1):
        steps = np.full(shape[0], schedule.timesteps[i])
        eps = predict_graph(P, model.cfg, batch, tp.leaf(x), steps, model.machinery).value.astype(np.float64)
        beta = schedule.betas[i]
        mean = (x - beta / np.sqrt(1.0 - ab[i]) * eps) / np.sqrt(1.0 - beta)
        if i > 0:
            z, _ = nm.seeded_normal(rng.substream(i), shape, np.float64)
            x = (mean + np.sqrt(var[i]) * z).astype(np.float32)
        else:
            x = mean.astype(np.float32)
    return x


# -- run manifest -------------------------------------------------------------


def write_manifest(path, entries):
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in entries.items():
            fh.write(f"{key}={value}\n")


def read_manifest(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line:
                key, _, value = line.partition("=")
                out[key] = value
    return out
