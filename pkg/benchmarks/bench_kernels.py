"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N] [--number N]

Each row reports the best of ``--repeat`` timings of ``--number`` calls, per
call, for every available backend, and the fallback/compiled ratio.
"""

import argparse
import timeit

import numpy as np

from idadapt import config as config_mod
from idadapt import dit
from idadapt import numerics as nm
from idadapt import pipeline as pl


def cases():
    rng = np.random.default_rng(0)
    f32 = lambda *s: rng.standard_normal(s).astype(np.float32)
    a, b = f32(64, 64), f32(64, 64)
    tall, wide = f32(256, 64), f32(64, 256)
    att = f32(70, 70)
    tok = f32(102, 64)
    cfg = config_mod.Config()
    model = pl.initial_model(cfg)
    x_vid = f32(cfg.frames, cfg.n_patches, cfg.patch_dim)
    x_txt, x_face, x_id = f32(6, cfg.d), f32(32, cfg.d), f32(2, cfg.d)
    return [
        ("matmul 64x64 @ 64x64", lambda: nm.matmul(a, b)),
        ("matmul 256x64 @ 64x256", lambda: nm.matmul(tall, wide)),
        ("softmax_rows 70x70", lambda: nm.softmax_rows(att)),
        ("layer_norm 102x64", lambda: nm.layer_norm(tok)),
        ("philox 4096 words", lambda: nm.random_words(nm.RngState(1), 4096)),
        ("model_forward reference", lambda: dit.model_forward(x_vid, x_txt, x_face, x_id, 50, model.params, cfg)),
    ]


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--number", type=int, default=200)
    args = parser.parse_args(argv)

    backends = nm.available_backends()
    if "compiled" not in backends:
        print("compiled extension not built; timing the fallback only")
    header = f"{'case':<28}" + "".join(f"{b + ' (us)':>16}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for name, fn in cases():
        number = max(1, args.number // 50) if name.startswith("model_forward") else args.number
        per_call = {}
        for b in backends:
            with nm.use_backend(b):
                fn()
                per_call[b] = min(timeit.repeat(fn, repeat=args.repeat, number=number)) / number * 1e6
        row = f"{name:<28}" + "".join(f"{per_call[b]:>16.1f}" for b in backends)
        if len(backends) == 2:
            row += f"{per_call['python'] / per_call['compiled']:>9.2f}x"
        print(row)


if __name__ == "__main__":
    main()
