"""Run orchestration: datasets, staged training, conditioned sampling, ablations.

All randomness flows from ``cfg.seed`` through the named streams ``data``,
``init``, ``train`` and ``sample``.
"""

from dataclasses import dataclass, field
import functools
import os

import numpy as np

from . import dataforge as df
from . import diffusion as dfu
from . import embedder as emb
from . import metrics as mt
from . import numerics as nm
from . import storage

ABLATIONS = ("full", "disable_can", "skip_pretrain", "disable_id_branch", "disable_face_branch",
             "direct_can_prediction")


def root_stream(cfg):
    return nm.RngState(cfg.seed)


def pose_ranges(cfg):
    return df.PoseRanges(cfg.angle_max, cfg.shift_max, cfg.scale_min, cfg.scale_max)


def make_world(cfg):
    return df.World.from_rng(root_stream(cfg).substream("data").substream("world"), cfg.width, cfg.height)


def initial_model(cfg):
    return dfu.Model.create(cfg, root_stream(cfg))


def recognizer(params):
    return functools.partial(emb.recognition_embedding, p=params)


def generate_datasets(cfg, params):
    """``{"image": Dataset, "video": Dataset}`` over one shared identity set."""
    world = make_world(cfg)
    data = root_stream(cfg).substream("data")
    rec = recognizer(params)
    common = dict(ranges=pose_ranges(cfg), threshold=cfg.filter_threshold)
    return {
        "image": df.make_dataset(world, rec, cfg.n_ids, cfg.per_id, "image", data,
                                 pose_rng=data.substream("poses_image"), **common),
        "video": df.make_dataset(world, rec, cfg.n_ids, cfg.per_id, "video", data, frames=cfg.frames,
                                 pose_rng=data.substream("poses_video"), **common),
    }


def dataset_paths(root, stage):
    return os.path.join(root, f"{stage}.jsonl"), os.path.join(root, f"{stage}.bin")


def save_datasets(root, datasets):
    os.makedirs(root, exist_ok=True)
    for stage, ds in datasets.items():
        storage.save_dataset(*dataset_paths(root, stage), ds)


def load_samples(root, params):
    """Kept training samples per stage from a dataset directory."""
    out = {}
    for stage in ("image", "video"):
        _, records = storage.load_dataset(*dataset_paths(root, stage))
        out[stage] = [dfu.sample_from_record(r, r.tag, params) for r in records if r.kept]
    return out


def samples_from_datasets(datasets, params):
    return {
        stage: [dfu.sample_from_record(r, ds.identities[r.identity].tag, params) for r in ds.kept]
        for stage, ds in datasets.items()
    }


# -- training -----------------------------------------------------------------


@dataclass
class CurvePoint:
    stage: str
    step: int
    l_noise: float
    l_id: float
    total: float


@dataclass
class RunResult:
    params: dict
    stages: list
    curve: list = field(default_factory=list)


def stage_plan(cfg, with_base=True):
    """``[(stage, steps)]`` in execution order."""
    plan = []
    if with_base and cfg.base_steps > 0:
        plan.append(("base", cfg.base_steps))
    if not cfg.skip_pretrain:
        plan.append(("image_pretrain", cfg.stage1_steps))
    plan.append(("video_finetune", cfg.stage2_steps))
    return plan


def _sources(stage, samples, cfg, codec, rng):
    img = dfu.BatchSource(samples["image"], cfg.batch_image, codec, rng.substream("image"))
    vid = dfu.BatchSource(samples["video"], cfg.batch_video, codec, rng.substream("video"))
    if stage == "image_pretrain":
        return [img]
    if stage == "video_finetune":
        return [vid]
    return [img, vid]  # the base model alternates single frames and clips


def train_stage(params, samples, stage, steps, cfg, codec, on_step=None):
    rng = root_stream(cfg).substream("train").substream(stage)
    schedule = dfu.NoiseSchedule.from_config(cfg)
    lr = cfg.base_lr if stage == "base" else cfg.lr
    opt = dfu.OptimizerState(lr=lr, total_steps=steps, weight_decay=cfg.weight_decay)
    sources = _sources(stage, samples, cfg, codec, rng)
    noise = rng.substream("noise")
    curve = []
    for k in range(steps):
        batch = sources[k % len(sources)].batch(k)
        params, opt, lb = dfu.train_step(params, batch, opt, stage, cfg, codec, schedule, noise.substream(k), step=k)
        point = CurvePoint(stage, k, lb.l_noise, lb.l_id, lb.total)
        curve.append(point)
        if on_step is not None:
            on_step(point)
    return params, curve


def run_training(cfg, samples, params, codec, out_dir=None, base_params=None, on_step=None):
    """Run every planned stage. ``base_params`` (a trained base) replaces the base stage."""
    params = dict(params)
    if base_params is not None:
        params.update({k: v for k, v in base_params.items() if k.startswith("base.")})
    plan = stage_plan(cfg, with_base=base_params is None)
    result = RunResult(params=params, stages=[s for s, _ in plan])
    for stage, steps in plan:
        params, curve = train_stage(params, samples, stage, steps, cfg, codec, on_step)
        result.curve.extend(curve)
        if out_dir is not None:
            storage.save_checkpoint(os.path.join(out_dir, f"{stage}.ckpt"), params, cfg, stage, steps)
    result.params = params
    return result


def write_curve(path, curve):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("stage step l_noise l_id total\n")
        for p in curve:
            fh.write(f"{p.stage} {p.step} {p.l_noise!r} {p.l_id!r} {p.total!r}\n")


def read_curve(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if header != ["stage", "step", "l_noise", "l_id", "total"]:
            raise ValueError(f"{path}: not a loss curve")
        for line in fh:
            s, k, a, b, c = line.split()
            out.append(CurvePoint(s, int(k), float(a), float(b), float(c)))
    return out


def noise_reduction(curve, stages=("image_pretrain", "video_finetune"), window=10, tail=100):
    """``(initial mean, final running mean)`` of ``l_noise`` over the given stages."""
    vals = np.array([p.l_noise for p in curve if p.stage in stages])
    if vals.size < window:
        raise ValueError("curve is shorter than the initial window")
    return float(vals[:window].mean()), float(vals[-min(tail, vals.size):].mean())


# -- conditioned generation ---------------------------------------------------


def condition_batch(cfg, codec, refs, tags, frames):
    """Conditions for sampling; clean latents are zeros and only fix the shape."""
    n = len(refs)
    shape = (n, frames, cfg.n_patches, cfg.patch_dim)
    return dfu.Batch(
        x0=np.zeros(shape, np.float32),
        face_mask=np.ones(shape, bool),
        ref=np.asarray(refs, np.float32).reshape(n, cfg.height, cfg.width),
        tokens=np.stack([dfu.prompt_tokens(t, video=frames > 1) for t in tags]) if n else np.zeros((0, 6), int),
        mask=dfu.subject_mask(),
        q_target=np.zeros((n, 2 * cfg.d), np.float32),
    )


def generate(params, cfg, codec, refs, tags, rng, steps=None, frames=None, chunk=25):
    """Sample one clip per reference; returns pixels ``[n, F, H, W]``."""
    frames = cfg.frames if frames is None else frames
    schedule = dfu.NoiseSchedule.from_config(cfg)
    if steps is not None and steps != schedule.T:
        schedule = schedule.respace(steps)
    model = dfu.Model(cfg=cfg, params=params, codec=codec, machinery=dfu.machinery_for("video_finetune", cfg))
    out = []
    for lo in range(0, len(refs), chunk):
        batch = condition_batch(cfg, codec, refs[lo:lo + chunk], tags[lo:lo + chunk], frames)
        latent = dfu.sample_loop(model, batch, schedule, rng.substream(lo))
        out.append(codec.decode(latent))
    if not out:
        return np.zeros((0, frames, cfg.height, cfg.width), np.float32)
    return np.concatenate(out)


@dataclass
class EvalIdentities:
    identities: list
    refs: np.ndarray  # [n, H, W]
    ref_frames: list
    mismatch: np.ndarray  # index of the mismatched identity per entry


def heldout_identities(cfg, n):
    """``n`` identities never seen in training, each with a reference render and a same-tag foil."""
    world = make_world(cfg)
    rng = root_stream(cfg).substream("sample").substream("identities")
    pose_rng = root_stream(cfg).substream("sample").substream("ref_poses")
    ranges = pose_ranges(cfg)
    idents, frames = [], []
    for _ in range(n):
        ident, rng = df.make_identity(rng)
        pose, pose_rng = df.random_pose(pose_rng, ranges)
        idents.append(ident)
        frames.append(df.render_frame(world, ident, pose))
    mismatch = np.zeros(n, np.int64)
    for i in range(n):
        same = [j for j in range(n) if j != i and idents[j].tag == idents[i].tag]
        others = same or [j for j in range(n) if j != i]
        mismatch[i] = min(others, key=lambda j: (j - i) % n) if others else i
    refs = np.stack([f.pixels for f in frames]) if frames else np.zeros((0, cfg.height, cfg.width), np.float32)
    return EvalIdentities(identities=idents, refs=refs, ref_frames=frames, mismatch=mismatch)


@dataclass
class IdentityCheck:
    matched: np.ndarray
    mismatched: np.ndarray

    @property
    def pass_rate(self):
        return float(np.mean(self.matched > self.mismatched))


def identity_check(params, cfg, codec, n=50, steps=None):
    """Similarity of sampled clips to their conditioning identity versus a foil."""
    ev = heldout_identities(cfg, n)
    rng = root_stream(cfg).substream("sample").substream("check")
    clips = generate(params, cfg, codec, ev.refs, [i.tag for i in ev.identities], rng, steps=steps)
    matched, mismatched = score_clips(params, clips, ev)
    return IdentityCheck(matched=matched, mismatched=mismatched)


def score_clips(params, clips, ev):
    rec = recognizer(params)
    ref_emb = np.stack([rec(r) for r in ev.refs])
    matched, mismatched = [], []
    for i, clip in enumerate(clips):
        frames = np.stack([rec(f) for f in clip])
        matched.append(mt.id_similarity_avg(mt.VideoEval(frames, ref_emb[i])))
        mismatched.append(mt.id_similarity_avg(mt.VideoEval(frames, ref_emb[ev.mismatch[i]])))
    return np.array(matched), np.array(mismatched)
