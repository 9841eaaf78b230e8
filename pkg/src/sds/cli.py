"""Command-line interface.

Exit codes: 0 success, 1 usage/configuration error, 2 data or format error,
3 numeric failure. Diagnostics go to stderr; every output file is written to
a temporary name and renamed into place.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .calibration import DataMode, load_calibration, make_calibration
from .errors import ConfigError, DataError, NumericError, SdsError
from .linalg import Rng, gaussian
from .model import (
    Activation,
    atomic_write_text,
    load_manifest,
    load_model,
    model_from_entries,
    read_container,
    random_model,
    save_model,
    save_weights,
    write_container,
)
from .pipeline import (
    SdsConfig,
    adjust_model,
    histogram_csv,
    model_error,
    nnz_fraction,
    prune_model,
    redense_model,
    run_sds,
    validate,
    weight_histogram,
)
from .pruning import NM, Method, Scope, check_pattern, parse_pattern, prune_magnitude
from .reconstruction import L2Form, Optimizer, ReconConfig, Routing
from .sparse import bench

log = logging.getLogger("sds")

MSD_OFFSETS = (1, 2, 3)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _pattern(text: str):
    try:
        return parse_pattern(text)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _u64(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed {text} is outside the unsigned 64-bit range")
    return value


def _dims(text: str) -> list[int]:
    try:
        dims = [int(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid dims {text!r}; expected e.g. 32,64,64,32") from None
    if len(dims) < 2 or min(dims) < 1:
        raise argparse.ArgumentTypeError("dims needs at least two positive sizes")
    return dims


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


# ------------------------------------------------------------------ parser


def _add_common(p):
    p.add_argument("--threads", type=_positive_int, help="cap on BLAS threads (fallback: SDS_THREADS)")
    p.add_argument("--verbose", "-v", action="store_true", help="log one line per layer per stage")


def _add_calib(p, seed=True):
    p.add_argument("--calib", required=True, help="SDST file holding the calib.x0 tensor")
    p.add_argument("--heldout-fraction", type=float, default=0.25,
                   help="fraction of token columns held out of optimization (default 0.25)")
    if seed:
        p.add_argument("--seed", type=_u64, default=0, help="seed for the held-out split and MSD (default 0)")


def _add_prune_opts(p, method=True):
    if method:
        p.add_argument("--method", choices=[m.value for m in Method], default="sparsegpt",
                       help="one-shot pruner (default sparsegpt)")
    p.add_argument("--pattern", type=_pattern, required=True, help="sparsity: ratio like 0.5, or N:M like 2:4")
    p.add_argument("--scope", choices=[s.value for s in Scope], default="layer",
                   help="ranking scope for unstructured ratios (default layer)")
    if method:
        p.add_argument("--damp", type=float, default=0.01,
                       help="Hessian dampening as a fraction of its mean diagonal (default 0.01)")


def _add_recon_opts(p, regularize=True):
    p.add_argument("--data-mode", choices=[m.value for m in DataMode], default="sd",
                   help="which model supplies layer inputs (default sd)")
    p.add_argument("--epochs", type=_positive_int, default=200, help="optimizer steps per layer (default 200)")
    p.add_argument("--lr", type=float, default=0.1, help="learning rate (default 0.1)")
    p.add_argument("--optimizer", choices=[o.value for o in Optimizer], default="adam",
                   help="adam or plain gradient descent (default adam)")
    if regularize:
        p.add_argument("--lambda1", type=float, default=0.1, help="L1 weight (default 0.1)")
        p.add_argument("--lambda2", type=float, default=0.1, help="L2 weight (default 0.1)")
        p.add_argument("--no-weight-reg", action="store_true", help="drop the L1/L2 terms from re-dense")
        p.add_argument("--l2-form", choices=[f.value for f in L2Form], default="squared",
                       help="L2 term as mean of squares or its square root (default squared)")
    p.add_argument("--routing", choices=[r.value for r in Routing], default="masked",
                   help="soft-mask gradient routing (default masked)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sds", description="Sparse-dense-sparse pruning for stacks of linear layers.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-model", help="write a random Gaussian teacher model")
    p.add_argument("--dims", type=_dims, required=True, help="layer widths, e.g. 32,64,64,32")
    p.add_argument("--activation", choices=[a.value for a in Activation], default="relu",
                   help="activation of every hidden layer (default relu)")
    p.add_argument("--std", type=float, help="weight std (default 1/sqrt(in_dim) per layer)")
    p.add_argument("--bias", action="store_true", help="give every layer a Gaussian bias")
    p.add_argument("--name", default="teacher", help="model name stored in the manifest")
    p.add_argument("--seed", type=_u64, default=0, help="generator seed (default 0)")
    p.add_argument("--out", required=True, help="output SDST file")
    p.add_argument("--manifest", required=True, help="output manifest JSON")
    _add_common(p)

    p = sub.add_parser("gen-calib", help="write a correlated Gaussian calibration set")
    p.add_argument("--in-dim", type=_positive_int, required=True, help="number of input features")
    p.add_argument("--tokens", type=_positive_int, required=True, help="number of token columns")
    p.add_argument("--correlation", type=float, default=0.5, help="cross-feature correlation (default 0.5)")
    p.add_argument("--seed", type=_u64, default=0, help="generator seed (default 0)")
    p.add_argument("--out", required=True, help="output SDST file")
    _add_common(p)

    p = sub.add_parser("prune", help="one-shot prune every layer")
    p.add_argument("--model", required=True, help="input SDST weights")
    p.add_argument("--manifest", required=True, help="model manifest JSON")
    _add_calib(p)
    _add_prune_opts(p)
    p.add_argument("--out", required=True, help="output SDST weights (same manifest)")
    _add_common(p)

    p = sub.add_parser("redense", help="regrow a pruned model toward the dense one")
    p.add_argument("--dense", required=True, help="dense SDST weights")
    p.add_argument("--sparse", required=True, help="pruned SDST weights")
    p.add_argument("--manifest", required=True, help="model manifest JSON")
    _add_calib(p)
    _add_recon_opts(p)
    p.add_argument("--out", required=True, help="output SDST weights")
    _add_common(p)

    p = sub.add_parser("adjust", help="soft-mask adjustment of a pruned model")
    p.add_argument("--dense", required=True, help="dense SDST weights")
    p.add_argument("--sparse", required=True, help="pruned SDST weights to adjust")
    p.add_argument("--manifest", required=True, help="model manifest JSON")
    _add_calib(p)
    _add_prune_opts(p, method=False)
    _add_recon_opts(p, regularize=False)
    p.add_argument("--out", required=True, help="output SDST weights")
    _add_common(p)

    p = sub.add_parser("run-sds", help="full prune / re-dense / prune pipeline")
    p.add_argument("--model", required=True, help="dense SDST weights")
    p.add_argument("--manifest", required=True, help="model manifest JSON")
    _add_calib(p)
    _add_prune_opts(p)
    _add_recon_opts(p)
    p.add_argument("--msd", action="store_true", help="draw fresh calibration samples for each stage")
    p.add_argument("--no-early-exit", action="store_true", help="always run the soft-mask adjustment")
    p.add_argument("--out", required=True, help="output SDST weights")
    p.add_argument("--report", required=True, help="output report JSON")
    _add_common(p)

    p = sub.add_parser("eval", help="output error of a model against the dense model")
    p.add_argument("--dense", required=True, help="dense SDST weights")
    p.add_argument("--model", required=True, help="SDST weights to evaluate")
    p.add_argument("--manifest", required=True, help="model manifest JSON")
    _add_calib(p)
    p.add_argument("--out", help="also write the result JSON here")
    _add_common(p)

    p = sub.add_parser("hist", help="weight histogram of one layer as CSV")
    p.add_argument("--model", required=True, help="SDST weights")
    p.add_argument("--manifest", required=True, help="model manifest JSON")
    p.add_argument("--layer", type=int, default=0, help="layer index (default 0)")
    p.add_argument("--bins", type=_positive_int, default=50, help="number of bins (default 50)")
    p.add_argument("--range", type=float, nargs=2, metavar=("LO", "HI"),
                   help="histogram range (default: symmetric around the largest magnitude)")
    zeros = p.add_mutually_exclusive_group()
    zeros.add_argument("--exclude-zeros", dest="exclude_zeros", action="store_true", default=True,
                       help="omit exact zeros (default)")
    zeros.add_argument("--include-zeros", dest="exclude_zeros", action="store_false",
                       help="count exact zeros")
    p.add_argument("--out", required=True, help="output CSV")
    _add_common(p)

    p = sub.add_parser("bench-spmm", help="time CSR against dense multiplication")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--model", help="benchmark a layer of this SDST model instead of a random matrix")
    src.add_argument("--rows", type=_positive_int, help="random matrix rows (default 1024)")
    p.add_argument("--manifest", help="model manifest JSON (with --model)")
    p.add_argument("--layer", type=int, default=0, help="layer index with --model (default 0)")
    p.add_argument("--cols", type=_positive_int, default=1024, help="random matrix columns (default 1024)")
    p.add_argument("--pattern", type=_pattern, default=parse_pattern("0.9"),
                   help="magnitude-prune the random matrix to this pattern (default 0.9)")
    p.add_argument("--tokens", type=_positive_int, default=128, help="columns of the dense operand (default 128)")
    p.add_argument("--repeats", type=_positive_int, default=5, help="timed repeats, >= 3 (default 5)")
    p.add_argument("--multi-thread", action="store_true", help="do not pin both paths to one thread")
    p.add_argument("--seed", type=_u64, default=0, help="generator seed (default 0)")
    p.add_argument("--out", required=True, help="output report JSON")
    _add_common(p)
    return parser


# ------------------------------------------------------------------ commands


def _calib(args):
    return load_calibration(args.calib, seed=args.seed)


def _recon_cfg(args, regularize=True) -> ReconConfig:
    kw = dict(epochs=args.epochs, lr=args.lr, optimizer=args.optimizer, routing=args.routing)
    if regularize:
        kw.update(lambda1=args.lambda1, lambda2=args.lambda2, use_weight_reg=not args.no_weight_reg,
                  l2_form=args.l2_form)
    else:
        kw.update(use_weight_reg=False)
    return ReconConfig(**kw)


def _scoped(args):
    if isinstance(args.pattern, NM):
        return args.pattern
    return parse_pattern(str(args.pattern.ratio), args.scope)


def _sds_cfg(args, **over) -> SdsConfig:
    kw = dict(
        method=getattr(args, "method", "sparsegpt"),
        pattern=_scoped(args),
        data_mode=getattr(args, "data_mode", "sd"),
        damp_fraction=getattr(args, "damp", 0.01),
        heldout_fraction=args.heldout_fraction,
    )
    kw.update(over)
    return SdsConfig(**kw)


def _held_in(calib, cfg):
    return calib.split(cfg.heldout_fraction)[0]


def _load_pair(args, other_attr):
    manifest = load_manifest(args.manifest)
    dense = model_from_entries(manifest, read_container(args.dense))
    other = model_from_entries(manifest, read_container(getattr(args, other_attr)))
    if not dense.same_shape(other):
        raise DataError("the two models have different layer shapes")
    return manifest, dense, other


def cmd_gen_model(args):
    model = random_model(Rng(args.seed), args.dims, args.activation, args.std, args.bias, args.name)
    save_model(model, args.out, args.manifest)


def cmd_gen_calib(args):
    calib = make_calibration(Rng(args.seed), args.in_dim, args.tokens, args.correlation)
    write_container(args.out, calib.to_entries())


def cmd_prune(args):
    manifest = load_manifest(args.manifest)
    model = model_from_entries(manifest, read_container(args.model))
    calib = _calib(args)
    cfg = _sds_cfg(args)
    validate(model, calib, cfg)
    pruned = prune_model(model, _held_in(calib, cfg), cfg)
    save_weights(pruned, args.out, manifest)


def cmd_redense(args):
    manifest, dense, sparse = _load_pair(args, "sparse")
    calib = _calib(args)
    cfg = SdsConfig(data_mode=args.data_mode, recon=_recon_cfg(args), heldout_fraction=args.heldout_fraction)
    out = redense_model(dense, sparse, _held_in(calib, cfg), cfg)
    save_weights(out, args.out, manifest)


def cmd_adjust(args):
    manifest, dense, sparse = _load_pair(args, "sparse")
    calib = _calib(args)
    cfg = _sds_cfg(args, recon=_recon_cfg(args, regularize=False))
    for i, layer in enumerate(sparse.layers):
        check_pattern(layer.weight.shape, cfg.pattern, layer=i)
    out = adjust_model(dense, sparse, _held_in(calib, cfg), cfg)
    save_weights(out, args.out, manifest)


def cmd_run_sds(args):
    manifest = load_manifest(args.manifest)
    model = model_from_entries(manifest, read_container(args.model))
    calib = _calib(args)
    cfg = _sds_cfg(
        args,
        recon=_recon_cfg(args),
        msd_seed_offsets=MSD_OFFSETS if args.msd else None,
        early_exit=not args.no_early_exit,
    )
    final, report = run_sds(model, calib, cfg)
    save_weights(final, args.out, manifest)
    atomic_write_text(args.report, report.to_json() + "\n")


def cmd_eval(args):
    manifest, dense, model = _load_pair(args, "model")
    calib = _calib(args)
    x_in, x_out = calib.split(args.heldout_fraction)
    result = {
        "mse_vs_dense_heldin": model_error(dense, model, x_in),
        "mse_vs_dense_heldout": model_error(dense, model, x_out) if x_out.shape[1] else None,
        "nnz_fraction": [nnz_fraction(layer.weight) for layer in model.layers],
    }
    text = json.dumps(result, indent=2)
    print(text)
    if args.out:
        atomic_write_text(args.out, text + "\n")


def cmd_hist(args):
    model = load_model(args.model, args.manifest)
    if not 0 <= args.layer < len(model):
        raise DataError(f"layer {args.layer} out of range (model has {len(model)} layers)")
    w = model.layers[args.layer].weight
    if args.range:
        lo, hi = args.range
    else:
        top = float(np.max(np.abs(w))) or 1.0
        lo, hi = -top, top
    counts = weight_histogram(w, args.bins, (lo, hi), args.exclude_zeros)
    atomic_write_text(args.out, histogram_csv(counts, (lo, hi)))


def cmd_bench_spmm(args):
    if args.repeats < 3:
        raise ConfigError("--repeats must be at least 3")
    rng = Rng(args.seed)
    if args.model:
        if not args.manifest:
            raise UsageError("sds bench-spmm: error: --model requires --manifest")
        model = load_model(args.model, args.manifest)
        if not 0 <= args.layer < len(model):
            raise DataError(f"layer {args.layer} out of range (model has {len(model)} layers)")
        w = model.layers[args.layer].weight  # benchmarked as stored
    else:
        w = gaussian(rng, args.rows or 1024, args.cols, 0.0, 1.0)
        check_pattern(w.shape, args.pattern)
        w, _ = prune_magnitude(w, args.pattern)
    x = gaussian(rng, w.shape[1], args.tokens, 0.0, 1.0)
    report = bench(w, w, x, args.repeats, threads=None if args.multi_thread else 1)
    atomic_write_text(args.out, report.to_json() + "\n")
    print(f"dense {report.dense_ms:.3f} ms, sparse {report.sparse_ms:.3f} ms, "
          f"speedup {report.speedup:.2f}x at density {report.nnz_fraction:.3f}", file=sys.stderr)


COMMANDS = {
    "gen-model": cmd_gen_model,
    "gen-calib": cmd_gen_calib,
    "prune": cmd_prune,
    "redense": cmd_redense,
    "adjust": cmd_adjust,
    "run-sds": cmd_run_sds,
    "eval": cmd_eval,
    "hist": cmd_hist,
    "bench-spmm": cmd_bench_spmm,
}


def _threads(args) -> int | None:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("SDS_THREADS")
    if env:
        try:
            value = int(env)
        except ValueError:
            raise UsageError(f"SDS_THREADS must be a positive integer, got {env!r}") from None
        if value < 1:
            raise UsageError(f"SDS_THREADS must be a positive integer, got {env!r}")
        return value
    return None


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
            stream=sys.stderr,
        )
        threads = _threads(args)
        if threads is not None:
            with threadpool_limits(limits=threads):
                COMMANDS[args.command](args)
        else:
            COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"sds: error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"sds: error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"sds: numeric failure: {exc}", file=sys.stderr)
        return 3
    except SdsError as exc:
        print(f"sds: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
