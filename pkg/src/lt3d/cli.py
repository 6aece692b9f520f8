"""``lt3d`` command line: train, predict, eval, phantoms, bench.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
Progress is printed as ``key=value`` lines.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ConfigError, ContractError, DataError, DimensionError, Lt3dError, NumericError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _common(p):
    p.add_argument("--config", help="JSON or key = value config file")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--threads", type=int, help="BLAS threads")
    p.add_argument("--out", help="output directory")


def build_parser():
    ap = argparse.ArgumentParser(prog="lt3d", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on the configured dataset")
    _common(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--epochs", type=int, help="override the epoch count")

    p = sub.add_parser("predict", help="write mask, probability and uncertainty volumes")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, nargs="+", help=".ltv image file(s)")

    p = sub.add_parser("eval", help="metrics and region uncertainty on labelled cases")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", help="evaluate every case of this manifest instead of the test split")
    p.add_argument("--workers", type=int, help="parallel cases")

    p = sub.add_parser("phantoms", help="generate a synthetic phantom dataset")
    _common(p)
    p.add_argument("--n", type=int, help="number of phantoms")

    p = sub.add_parser("bench", help="timing / token-count benchmarks to CSV")
    _common(p)
    p.add_argument("mode", choices=["attention", "sampler", "kernels"])
    p.add_argument("--sizes", type=int, nargs="+", default=[1024, 2048, 4096, 8192])
    p.add_argument("--repeats", type=int, default=9)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--cases", type=int, default=200)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    return ap


def _load_cfg(args, **extra):
    from .config import load_config
    over = {k: v for k, v in (("seed", args.seed), ("threads", args.threads), ("out_dir", args.out)) if v is not None}
    over.update({k: v for k, v in extra.items() if v is not None})
    return load_config(args.config, over)


def _emit(**kv):
    print(" ".join(f"{k}={v}" for k, v in kv.items()), flush=True)


def cmd_train(args):
    from .config import dump_config_text
    from .train import load_split, train
    cfg = _load_cfg(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.txt").write_text(dump_config_text(cfg))
    train_set, test_set = load_split(cfg)
    _emit(event="data", train=len(train_set), test=len(test_set))
    res = train(cfg, train_set, out, resume=args.resume, log=print, epochs=args.epochs)
    _emit(event="done", checkpoint=res.checkpoint)


def cmd_predict(args):
    from .data import load_volume, preprocess
    from .train import check_volume_shape, load_params, predict_files
    cfg = _load_cfg(args)
    params = load_params(args.checkpoint, cfg)
    out = Path(cfg.out_dir)
    for path in args.input:
        sample = load_volume(path)
        check_volume_shape(cfg, sample.image.shape)
        paths = predict_files(params, cfg, preprocess(sample), out)
        _emit(event="predicted", id=sample.id, **{k: str(v) for k, v in paths.items()})


def cmd_eval(args):
    from .data import load_manifest_samples, preprocess
    from .train import evaluate, load_params, load_split, model_predictor
    cfg = _load_cfg(args, manifest=None)
    params = load_params(args.checkpoint, cfg)
    if args.manifest:
        samples = [preprocess(s) for s in load_manifest_samples(args.manifest, require_label=True)]
    else:
        samples = load_split(cfg)[1]
    rep = evaluate(samples, model_predictor(params, cfg), workers=args.workers or cfg.workers)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(rep.to_json())
    (out / "eval.txt").write_text(rep.to_text())
    sys.stdout.write(rep.to_text())


def cmd_phantoms(args):
    from .data import write_phantom_dataset
    cfg = _load_cfg(args)
    path = write_phantom_dataset(Path(cfg.out_dir), args.n or cfg.n_phantoms, cfg.phantom_seed
                                 if args.seed is None else args.seed)
    _emit(event="phantoms", manifest=path)


def cmd_bench(args):
    from threadpoolctl import threadpool_limits

    from . import bench
    cfg = _load_cfg(args)
    out = Path(args.out or ".") / f"bench_{args.mode}.csv"
    with threadpool_limits(cfg.threads):
        if args.mode == "attention":
            rows = bench.bench_attention(args.sizes, d=args.dim, repeats=args.repeats, seed=cfg.seed)
            fields = bench.ATTENTION_FIELDS
        elif args.mode == "sampler":
            rows = bench.bench_sampler(args.cases, seed=cfg.seed, alpha=args.alpha, beta=args.beta)
            fields = bench.SAMPLER_FIELDS
        else:
            rows = bench.bench_kernels(args.repeats, seed=cfg.seed)
            fields = bench.KERNEL_FIELDS
    bench.write_csv(rows, out, fields)
    if args.mode == "attention":
        for variant in ("linear", "quadratic"):
            for n, r in bench.scaling_ratios(rows, variant).items():
                _emit(variant=variant, n=n, ratio=f"{r:.3f}")
    elif args.mode == "sampler":
        fr = [r["fraction"] for r in rows]
        _emit(cases=len(rows), mean_fraction=f"{sum(fr) / len(fr):.4f}",
              max_abs_error=f"{max(r['abs_error'] for r in rows):.4f}")
    _emit(event="bench", csv=out)


COMMANDS = {"train": cmd_train, "predict": cmd_predict, "eval": cmd_eval, "phantoms": cmd_phantoms,
            "bench": cmd_bench}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error=config message={json.dumps(str(exc))}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"error=numeric message={json.dumps(str(exc))}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, DimensionError, ContractError) as exc:
        print(f"error=data message={json.dumps(str(exc))}", file=sys.stderr)
        return EXIT_DATA
    except Lt3dError as exc:
        print(f"error=internal message={json.dumps(str(exc))}", file=sys.stderr)
        return 1
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
