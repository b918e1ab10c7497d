"""Finite-difference check of the training loss gradients.

Runs in float64 on a small configuration at a random parameter point (zero
initialised output layers would otherwise hide every upstream gradient).
Each trainable tensor is checked on a few seeded coordinates: the analytic
gradient restricted to them is compared with ``finite_diff_grad`` of the
loss seen as a function of just those coordinates.
"""

from dataclasses import dataclass

import numpy as np

from . import _tape as tp
from . import config as config_mod
from . import diffusion as dfu
from . import numerics as nm

SMALL = config_mod.Config(
    d=16, n_blocks=2, d_t=8, c1=4, perceiver_depth=1, n_face_tokens=32,
    height=8, width=8, frames=2, T=20, batch_image=2, batch_video=2,
)


@dataclass
class TensorCheck:
    name: str
    rel_error: float
    analytic_norm: float


def _random_point(params, rng, rel=0.5, floor=0.05):
    """Every tensor jittered by noise proportional to its own scale (``floor`` for zero tensors)."""
    out = {}
    for i, name in enumerate(sorted(params)):
        w = params[name].astype(np.float64)
        rms = float(np.sqrt(np.mean(w * w)))
        noise, _ = nm.normals(rng.substream(i), w.size)
        out[name] = w + (rel * rms if rms > 0 else floor) * noise.reshape(w.shape)
    return out


def _samples(cfg, rng, frames, n):
    H, W = cfg.height, cfg.width
    out = []
    for i in range(n):
        r = rng.substream(i)
        x0, r = nm.uniforms(r, frames * H * W)
        ref, r = nm.uniforms(r, H * W)
        q, r = nm.normals(r, 2 * cfg.d)
        out.append(dfu.TrainSample(
            x0=x0.reshape(frames, H, W).astype(np.float32),
            ref=ref.reshape(H, W).astype(np.float32),
            tokens=dfu.prompt_tokens(i % 4, video=frames > 1),
            mask=dfu.subject_mask(),
            face_regions=[(1.0, 1.0, W - 2.0, H - 3.0)] * frames,
            q_target=q,
        ))
    return out


def _as_float64(batch):
    return dfu.Batch(x0=batch.x0.astype(np.float64), face_mask=batch.face_mask, ref=batch.ref.astype(np.float64),
                     tokens=batch.tokens, mask=batch.mask, q_target=batch.q_target.astype(np.float64))


def check_seed(seed, stage="video_finetune", cfg=SMALL, coords=4, h=1e-3):
    """Relative errors for every trainable tensor of ``stage`` at one random point."""
    root = nm.RngState(seed)
    model = dfu.Model.create(cfg, root)
    params = _random_point(model.params, root.substream("point"))
    frames = 1 if stage == "image_pretrain" else cfg.frames
    batch = _as_float64(dfu.collate(_samples(cfg, root.substream("data"), frames, 2), model.codec))
    schedule = dfu.NoiseSchedule.from_config(cfg)
    draws = dfu.draw_noise(root.substream("noise"), batch, schedule, 0.5)
    draws.eps = draws.eps.astype(np.float64)
    draws.coin = np.array([True, False])
    machinery = dfu.machinery_for(stage, cfg)
    lam = 0.0 if stage == "base" else 0.5
    trainable = dfu.trainable_names(params, stage, cfg)

    def loss(p, names=()):
        P = {k: tp.leaf(v, requires_grad=k in names) for k, v in p.items()}
        root_var, _, _ = dfu.loss_graph(P, cfg, batch, draws, schedule, model.codec, machinery, lam)
        return root_var, P

    root_var, P = loss(params, set(trainable))
    tp.backward(root_var)
    results = []
    for i, name in enumerate(trainable):
        g = P[name].grad if P[name].grad is not None else np.zeros_like(params[name])
        flat = params[name].reshape(-1)
        k = min(coords, flat.size)
        idx, _ = nm.integers(root.substream("coords").substream(i), k, flat.size)
        idx = np.unique(idx)

        def f(sub, name=name, idx=idx):
            q = dict(params)
            w = params[name].copy().reshape(-1)
            w[idx] = sub
            q[name] = w.reshape(params[name].shape)
            return float(loss(q)[0].value)

        num = nm.finite_diff_grad(f, flat[idx].copy(), h)
        ana = g.reshape(-1)[idx]
        denom = max(np.linalg.norm(ana), np.linalg.norm(num), 1e-10)
        results.append(TensorCheck(name, float(np.linalg.norm(ana - num) / denom), float(np.linalg.norm(ana))))
    return results


def run_suite(seeds=(0, 1, 2, 3, 4), stages=("image_pretrain", "video_finetune", "base"), cfg=SMALL):
    """``{(seed, stage): [TensorCheck]}`` over every seed and stage."""
    return {(seed, stage): check_seed(seed, stage, cfg) for seed in seeds for stage in stages}


def worst(results):
    return max((c for checks in results.values() for c in checks), key=lambda c: c.rel_error)
