"""Command line entry point ``ldarecon``.

Verbs::

    solve          run an experiment from a JSON config (flags override fields)
    train          toy-scale unrolled training on synthetic denoising patches
    bench          time the convolution backends
    make-data      write synthetic PGM images
    inspect-trace  summarize a trace CSV

Exit codes: 0 success, 2 invalid configuration, 3 numerical failure, 4 I/O.
"""
import argparse
import sys
from pathlib import Path

import numpy as np

from ldarecon import numerics
from ldarecon import training as tr
from ldarecon.errors import LdaError
from ldarecon.harness import bench, data, experiment
from ldarecon.solver import IterateTrace

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _solve(args):
    raw = {}
    if args.config:
        cfg = experiment.ExperimentConfig.from_json(args.config)
        raw = cfg.to_dict()
    overrides = {
        "task": args.task, "cs_ratio": args.cs_ratio, "image_source": args.image_source,
        "n_images": args.n_images, "seed": args.seed, "output_dir": args.output,
        "workers": args.workers, "noise_sigma": args.noise_sigma,
    }
    raw.update({k: v for k, v in overrides.items() if v is not None})
    if args.image_shape:
        raw["image_shape"] = args.image_shape
    if args.weight is not None:
        raw["feature_map"] = {"variant": "linear_diff", "weight": args.weight}
    if args.params:
        raw["feature_map"] = {"variant": "conv_net", "params": args.params}
    solver = dict(raw.get("solver", {}))
    if args.max_iters is not None:
        solver["max_iters"] = args.max_iters
    if args.eps_tol is not None:
        solver["eps_tol"] = args.eps_tol
    raw["solver"] = solver
    if args.step_mode:
        raw["schedule"] = dict(raw.get("schedule", {}), mode=args.step_mode)
    cfg = experiment.ExperimentConfig.from_dict(raw)
    manifest = experiment.run_experiment(cfg)
    print(f"wrote {len(manifest['images'])} reconstructions to {cfg.output_dir}")
    print(Path(cfg.output_dir, "metrics.csv").read_text(), end="")


def _train(args):
    rng = numerics.make_rng(args.seed)
    shape = tuple(args.image_shape or (16, 16))
    if args.image_source == "synthetic":
        images = data.synthetic_images(args.n_samples, shape, rng)
    else:
        images = data.load_glob(args.image_source, shape)
    noisy = images + args.noise_sigma * rng.standard_normal(images.shape)
    dataset = [tr.TrainSample(b.ravel(), x, b) for b, x in zip(noisy, images)]
    stages = tuple((k, args.steps) for k in range(args.k_start, args.k_end + 1, 2))
    config = tr.TrainConfig(stages=stages, learning_rate=args.lr, batch_size=args.batch_size,
                            depth=args.depth, variant=args.variant)
    out = Path(args.output)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise data.DataIOError(f"cannot create {out}: {exc}") from exc
    theta, curve = tr.train(dataset, config, rng, checkpoint_dir=out)
    theta.save(out / "params", {"variant": args.variant, "seed": args.seed})
    tr.write_loss_curve(out / "loss.csv", curve)
    print(f"final mini-batch loss {curve[-1][1]:.6g} after {len(curve)} steps; "
          f"parameters in {out / 'params.bin'}")


def _bench(args):
    print(bench.format_rows(bench.run(repeat=args.repeat)))


def _make_data(args):
    rng = numerics.make_rng(args.seed)
    shape = tuple(args.image_shape or (33, 33))
    images = data.synthetic_images(args.count, shape, rng, args.kind)
    for i, img in enumerate(images):
        data.write_pgm(Path(args.output) / f"img_{i:04d}.pgm", img, maxval=args.maxval)
    print(f"wrote {len(images)} images to {args.output}")


def _inspect(args):
    try:
        trace = IterateTrace.from_csv(Path(args.trace), m=args.m)
    except OSError as exc:
        raise data.DataIOError(f"cannot read {args.trace}: {exc}") from exc
    if not trace.rows:
        print("empty trace")
        return
    eps = trace.column("eps")
    branches = trace.column("branch")
    print(f"iterations      {len(trace)}")
    print(f"reductions      {int(trace.column('reduced').sum())}")
    print(f"eps             {eps[0]:.6g} -> {eps[-1]:.6g}")
    print(f"phi_eps         {trace.rows[0].phi_eps:.10g} -> {trace.rows[-1].phi_eps:.10g}")
    print(f"final grad norm {trace.rows[-1].grad_norm:.6g}")
    print(f"u branch share  {np.mean(branches == 'u'):.3f}")
    if args.m:
        steps = np.diff(trace.descent_values())
        print(f"max increase of phi_eps + m*eps/2: {max(steps.max(initial=0.0), 0.0):.3e}")


def build_parser():
    parser = argparse.ArgumentParser(prog="ldarecon", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("solve", help="run an experiment")
    p.add_argument("--config", help="JSON config or a previous run's manifest.json")
    p.add_argument("--task", choices=experiment.TASKS)
    p.add_argument("--cs-ratio", type=float)
    p.add_argument("--image-source", help="'synthetic' or a glob of PGM files")
    p.add_argument("--image-shape", type=int, nargs=2)
    p.add_argument("--n-images", type=int)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--weight", type=float, help="use the linear_diff map with this weight")
    p.add_argument("--params", help="use a trained conv_net checkpoint")
    p.add_argument("--max-iters", type=int)
    p.add_argument("--eps-tol", type=float)
    p.add_argument("--step-mode", choices=("theory", "fixed_list", "line_search"))
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--output")
    p.set_defaults(func=_solve)

    p = sub.add_parser("train", help="toy-scale unrolled training")
    p.add_argument("--image-source", default="synthetic")
    p.add_argument("--image-shape", type=int, nargs=2)
    p.add_argument("--n-samples", type=int, default=64)
    p.add_argument("--noise-sigma", type=float, default=0.1)
    p.add_argument("--k-start", type=int, default=3)
    p.add_argument("--k-end", type=int, default=5)
    p.add_argument("--steps", type=int, default=100, help="Adam steps per stage")
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--depth", type=int, default=8)
    p.add_argument("--variant", choices=("lda", "gd"), default="lda")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", default="runs/train")
    p.set_defaults(func=_train)

    p = sub.add_parser("bench", help="time the convolution backends")
    p.add_argument("--repeat", type=int, default=5)
    p.set_defaults(func=_bench)

    p = sub.add_parser("make-data", help="write synthetic PGM images")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--image-shape", type=int, nargs=2)
    p.add_argument("--kind", choices=("piecewise", "bumps", "mixed"), default="mixed")
    p.add_argument("--maxval", type=int, choices=(255, 65535), default=255)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", default="runs/data")
    p.set_defaults(func=_make_data)

    p = sub.add_parser("inspect-trace", help="summarize a trace CSV")
    p.add_argument("trace")
    p.add_argument("--m", type=int, default=0, help="feature count, enables the descent check")
    p.set_defaults(func=_inspect)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except LdaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
