"""Command line: datagen, train, sample, eval, gradcheck, ablate.

Every Config field is also a ``--key value`` flag; ``IDADAPT_SEED`` overrides
the seed. Exit codes: 0 success, 2 configuration error, 3 data error,
4 numeric abort.
"""

import argparse
from dataclasses import fields
import json
import os
import sys

import numpy as np

from . import config as config_mod
from . import dataforge as df
from . import diffusion as dfu
from . import gradcheck
from . import metrics as mt
from . import numerics as nm
from . import pipeline as pl
from . import storage
from .errors import ContractError, DimensionError, EmptyInputError, FormatError, NumericAbort

SEED_ENV = "IDADAPT_SEED"

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _add_config_flags(p):
    p.add_argument("--config", help="key = value config file")
    group = p.add_argument_group("config overrides")
    for f in fields(config_mod.Config):
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", metavar="VALUE")


def resolve_config(args):
    cfg = config_mod.Config()
    if getattr(args, "config", None):
        try:
            cfg = config_mod.load(args.config)
        except OSError as exc:
            raise config_mod.ConfigError(f"cannot read config file: {exc}") from None
    overrides = {f.name: getattr(args, f"cfg_{f.name}") for f in fields(config_mod.Config)
                 if getattr(args, f"cfg_{f.name}", None) is not None}
    if os.environ.get(SEED_ENV):
        overrides["seed"] = os.environ[SEED_ENV]
    return cfg.with_overrides(**config_mod.coerce(overrides)) if overrides else cfg


# -- datagen ------------------------------------------------------------------


def cmd_datagen(cfg, out):
    model = pl.initial_model(cfg)
    datasets = pl.generate_datasets(cfg, model.params)
    pl.save_datasets(out, datasets)
    summary = {stage: ds.summary() for stage, ds in datasets.items()}
    for stage, s in summary.items():
        print(f"{stage}: candidates={s['candidates']} kept={s['kept']} dropped={s['dropped']}")
    return summary


# -- train --------------------------------------------------------------------


def cmd_train(cfg, data, out, base_checkpoint=None):
    os.makedirs(out, exist_ok=True)
    model = pl.initial_model(cfg)
    samples = pl.load_samples(data, model.params)
    for stage, rows in samples.items():
        if not rows:
            raise EmptyInputError(f"{data}: no kept {stage} samples")
    if any(s.x0.shape[0] != 1 for s in samples["image"]):
        raise ContractError(f"{data}: image dataset holds multi-frame samples")
    base = None
    if base_checkpoint:
        base = storage.load_checkpoint(base_checkpoint, cfg).params
    result = pl.run_training(cfg, samples, model.params, model.codec, out_dir=out, base_params=base)
    final = os.path.join(out, "final.ckpt")
    last = result.stages[-1] if result.stages else "init"
    storage.save_checkpoint(final, result.params | {"codec.q": model.codec.q}, cfg, last,
                            len([p for p in result.curve if p.stage == last]))
    pl.write_curve(os.path.join(out, "loss_curve.txt"), result.curve)
    manifest = {
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
        "arch_hash": cfg.arch_hash(),
        "stages": ",".join(result.stages),
        "lambda_id": cfg.lambda_id,
        "face_mask_prob": cfg.face_mask_prob,
        "T": cfg.T,
        "beta_start": cfg.beta_start,
        "beta_end": cfg.beta_end,
    }
    for stage in result.stages:
        pts = [p for p in result.curve if p.stage == stage]
        manifest[f"{stage}.steps"] = len(pts)
        if pts:
            manifest[f"{stage}.l_noise_first10"] = repr(float(np.mean([p.l_noise for p in pts[:10]])))
            manifest[f"{stage}.l_noise_last100"] = repr(float(np.mean([p.l_noise for p in pts[-100:]])))
            manifest[f"{stage}.l_id_last100"] = repr(float(np.mean([p.l_id for p in pts[-100:]])))
    dfu.write_manifest(os.path.join(out, "run_manifest.txt"), manifest)
    print(f"trained stages: {manifest['stages'] or 'none'}; checkpoint {final}")
    return manifest


# -- sample -------------------------------------------------------------------


def _load_model(path, cfg=None):
    ck = storage.load_checkpoint(path, cfg)
    params = dict(ck.params)
    q = params.pop("codec.q", None)
    codec = pl.initial_model(ck.cfg).codec if q is None else dfu.LatentCodec(
        q=q, patch=ck.cfg.patch, height=ck.cfg.height, width=ck.cfg.width)
    return ck.cfg, params, codec


def _reference(cfg, identity_seed, reference, tag):
    """``(pixels, tag, landmarks or None, description)``."""
    if reference is not None:
        frames, _ = storage.read_frames(reference)
        if frames.shape[0] == 0 or frames.shape[1:] != (cfg.height, cfg.width):
            raise FormatError(f"{reference}: need a {cfg.height}x{cfg.width} reference frame")
        return frames[0], df.Tag[tag.upper()], None, {"reference": os.path.abspath(reference)}
    ident, _ = df.make_identity(nm.RngState(identity_seed).substream("identity"))
    frame = df.render_frame(pl.make_world(cfg), ident, df.Pose())
    return frame.pixels, ident.tag, frame.landmarks, {"identity_seed": identity_seed}


def cmd_sample(checkpoint, out, n, identity_seed=None, reference=None, tag="adult", steps=None, cfg=None):
    cfg, params, codec = _load_model(checkpoint, cfg)
    if (identity_seed is None) == (reference is None):
        raise ContractError("give exactly one of an identity seed or a reference frame file")
    os.makedirs(out, exist_ok=True)
    ref, ref_tag, landmarks, source = _reference(cfg, identity_seed, reference, tag)
    sidecar = os.path.join(out, "clips.jsonl")
    if n == 0:
        open(sidecar, "w", encoding="utf-8").close()
        return []
    rng = pl.root_stream(cfg).substream("sample").substream("cli")
    clips = pl.generate(params, cfg, codec, np.repeat(ref[None], n, axis=0), [ref_tag] * n, rng, steps=steps)
    storage.write_frames(os.path.join(out, "clips.bin"), clips.reshape(-1, cfg.height, cfg.width),
                         cfg.height, cfg.width, cfg.frames)
    rec = pl.recognizer(params)
    frame_lines, ref_lines, meta = [], [], []
    for i, clip in enumerate(clips):
        meta.append({"index": i, "tag": ref_tag.name.lower(), "frames": cfg.frames, "height": cfg.height,
                     "width": cfg.width, "steps": steps or cfg.T, "seed": cfg.seed} | source)
        frame_lines += [mt.frame_record(i, rec(f)) for f in clip]
        ref_lines.append(mt.frame_record(i, rec(ref), landmarks, cfg.width, cfg.height)
                         if landmarks is not None else mt.frame_record(i, rec(ref)))
    with open(sidecar, "w", encoding="utf-8") as fh:
        for m in meta:
            fh.write(json.dumps(m, sort_keys=True) + "\n")
    mt.write_frame_records(os.path.join(out, "samples.jsonl"), frame_lines)
    mt.write_frame_records(os.path.join(out, "references.jsonl"), ref_lines)
    print(f"wrote {n} clips of shape {clips.shape[1:]} to {out}")
    return clips


# -- eval ---------------------------------------------------------------------


def cmd_eval(samples, references, out=None, thresholds=mt.Thresholds()):
    rows, summary, rates = mt.evaluate_files(samples, references, thresholds)
    text = mt.report_text(summary, rates)
    if out:
        with open(out + ".txt", "w", encoding="utf-8") as fh:
            fh.write(text)
        with open(out + ".kv", "w", encoding="utf-8") as fh:
            fh.write(mt.report_kv(summary, rates, rows))
    sys.stdout.write(text)
    return rows, summary, rates


# -- gradcheck ----------------------------------------------------------------


def cmd_gradcheck(seeds, tolerance=1e-3):
    results = gradcheck.run_suite(seeds=tuple(seeds))
    failed = 0
    for (seed, stage), checks in results.items():
        bad = [c for c in checks if not c.rel_error < tolerance]
        failed += len(bad)
        worst = max(c.rel_error for c in checks)
        print(f"seed={seed} stage={stage} tensors={len(checks)} worst_rel_error={worst:.3e}"
              f" {'ok' if not bad else 'FAIL'}")
        for c in bad:
            print(f"  {c.name}: {c.rel_error:.3e}")
    return failed


# -- ablate -------------------------------------------------------------------


def variant_config(cfg, name):
    if name not in pl.ABLATIONS:
        raise config_mod.ConfigError(f"unknown ablation {name!r}")
    return cfg if name == "full" else cfg.with_overrides(**{name: True})


def designated_parameters(cfg_variant, params):
    return sorted(n for n in params if dfu.frozen_by_flags(n, cfg_variant))


def cmd_ablate(cfg, data, out, variants=pl.ABLATIONS, eval_samples=10):
    os.makedirs(out, exist_ok=True)
    model = pl.initial_model(cfg)
    samples = pl.load_samples(data, model.params)
    base = None
    if cfg.base_steps > 0:
        base, curve = pl.train_stage(dict(model.params), samples, "base", cfg.base_steps, cfg, model.codec)
        pl.write_curve(os.path.join(out, "curve_base.txt"), curve)
    full_trainable = set(dfu.trainable_names(model.params, "image_pretrain", cfg))
    rows = []
    for name in variants:
        vcfg = variant_config(cfg, name)
        res = pl.run_training(vcfg, samples, model.params, model.codec, base_params=base)
        pl.write_curve(os.path.join(out, f"curve_{name}.txt"), res.curve)
        designated = designated_parameters(vcfg, model.params)
        untouched = all(np.array_equal(res.params[n], model.params[n]) for n in designated)
        exact_set = full_trainable - set(dfu.trainable_names(model.params, "image_pretrain", vcfg)) == set(designated)
        tail = [p for p in res.curve if p.stage == "video_finetune"][-100:]
        row = {
            "variant": name,
            "stages": "+".join(res.stages),
            "steps": len(res.curve),
            "l_noise_final": float(np.mean([p.l_noise for p in tail])) if tail else None,
            "l_id_final": float(np.mean([p.l_id for p in tail])) if tail else None,
            "designated": len(designated),
            "designated_untouched": bool(untouched and exact_set),
        }
        if eval_samples:
            chk = pl.identity_check(res.params, vcfg, model.codec, n=eval_samples)
            row |= {"id_pass_rate": chk.pass_rate, "id_matched": float(chk.matched.mean()),
                    "id_mismatched": float(chk.mismatched.mean())}
        rows.append(row)
        print(" ".join(f"{k}={_fmt(v)}" for k, v in row.items()), flush=True)
    with open(os.path.join(out, "ablation.kv"), "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(" ".join(f"{k}={_fmt(v)}" for k, v in row.items()) + "\n")
    with open(os.path.join(out, "ablation.txt"), "w", encoding="utf-8") as fh:
        keys = list(rows[0]) if rows else []
        fh.write(" | ".join(keys) + "\n")
        for row in rows:
            fh.write(" | ".join(_fmt(row[k]) for k in keys) + "\n")
    return rows


def _fmt(v):
    if v is None:
        return "n/a"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


# -- entry point --------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="idadapt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate and filter the image and video datasets")
    _add_config_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="run the training stages")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--base-checkpoint", help="reuse the base weights of this checkpoint")

    p = sub.add_parser("sample", help="sample clips conditioned on one identity")
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--identity-seed", type=int)
    src.add_argument("--reference", help="frame blob whose first frame is the reference")
    p.add_argument("--tag", default="adult", choices=[t.name.lower() for t in df.Tag])
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--steps", type=int, help="respaced sampling chain length")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="score sampled clips against references")
    p.add_argument("--samples", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--out", help="report path prefix (.txt and .kv are written)")
    p.add_argument("--theta-id", type=float, default=mt.Thresholds.identity)
    p.add_argument("--theta-motion", type=float, default=mt.Thresholds.motion)

    p = sub.add_parser("gradcheck", help="finite-difference check of every trainable tensor")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--tolerance", type=float, default=1e-3)

    p = sub.add_parser("ablate", help="train every ablation variant on the same seeds")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", nargs="+", default=list(pl.ABLATIONS), choices=pl.ABLATIONS)
    p.add_argument("--eval-samples", type=int, default=10)
    return parser


def _dispatch(args):
    if args.command == "datagen":
        cmd_datagen(resolve_config(args), args.out)
    elif args.command == "train":
        cmd_train(resolve_config(args), args.data, args.out, args.base_checkpoint)
    elif args.command == "sample":
        if args.n < 0:
            raise config_mod.ConfigError("--n must be non-negative")
        cmd_sample(args.checkpoint, args.out, args.n, args.identity_seed, args.reference, args.tag, args.steps)
    elif args.command == "eval":
        cmd_eval(args.samples, args.references, args.out, mt.Thresholds(args.theta_id, args.theta_motion))
    elif args.command == "gradcheck":
        return EXIT_NUMERIC if cmd_gradcheck(args.seeds, args.tolerance) else EXIT_OK
    elif args.command == "ablate":
        cmd_ablate(resolve_config(args), args.data, args.out, args.variants, args.eval_samples)
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except config_mod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericAbort as exc:
        where = f" (tensor {exc.tensor_name}, step {exc.step})" if exc.tensor_name else ""
        print(f"numeric abort: {exc}{where}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, EmptyInputError, ContractError, DimensionError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
