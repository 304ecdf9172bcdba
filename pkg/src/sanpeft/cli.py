"""``sanpeft`` command line.

Exit codes: 0 success, 1 configuration / input error, 2 numeric or
verification failure.  ``SANPEFT_OUT`` sets the default output directory.
"""
import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import apply_overrides, load_config, preset_names, split_compare
from .data import TASKS, gen_synthetic, write_csv, write_idx
from .errors import ConfigError, SanPeftError, VerificationError
from .methods import parse_method
from .models import build_reference_model, count_params, model_spec, recalibration_param_count
from .reparam import audit_merge, gradcheck, merge_model, perturb
from .train import TrainConfig, compare, config_hash, format_table, train, write_json

log = logging.getLogger("sanpeft")

DEFAULT_METHODS = ("full", "linear_probe", "bitfit", "lora:4", "vpt:1", "ssf", "san-modeling", "san-propagation",
                   "san-both")
GRADCHECK_TOL = 1e-4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _out_root(arg):
    if arg:
        return Path(arg)
    return Path(os.environ.get("SANPEFT_OUT", "runs"))


def _dims(text):
    if text is None:
        return None
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(f"--dims must be comma-separated integers, got {text!r}") from None


def _resolved(args):
    cfg = apply_overrides(load_config(args.config), args.set)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    return cfg


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(args):
    cfg = TrainConfig.from_dict(_resolved(args))
    out = _out_root(args.out) if args.out else _out_root(None) / "train"
    m = train(cfg, out_dir=out)
    print(f"{m.method}: eval_acc {m.final_eval_acc:.4f} (base {m.base_eval_acc:.4f}), "
          f"trainable {m.trainable}/{m.total} ({100 * m.ratio:.2f}%), artifacts in {out}")
    return 0


def _report_and_verdict(report, path, header):
    doc = {"header": header, **report.to_dict()}
    write_json(path, doc)
    print(f"{report.method}: max deviation {report.max_deviation:.3e} "
          f"[{report.tolerance_class}] verdict {report.verdict}; report {path}")
    if not report.passed:
        raise VerificationError(f"merged model deviates by {report.max_deviation:.3e} on an exact-class model")
    return 0


def cmd_merge(args):
    state, adapter, manifest = load_checkpoint(args.checkpoint)
    if adapter is None:
        raise ConfigError(f"{args.checkpoint}: checkpoint holds no adapter to merge")
    merged = merge_model(state, adapter)
    src = Path(args.checkpoint)
    out = Path(args.out) if args.out else src.with_name("merged")
    header = dict(manifest.get("header") or {})
    save_checkpoint(out, merged, header=header)
    report = audit_merge((state, adapter), merged, args.probe_seed, args.probe_count)
    return _report_and_verdict(report, out.with_name(out.name + "_report.json"), header)


def cmd_verify(args):
    state, adapter, manifest = load_checkpoint(args.adapted)
    merged, extra, _ = load_checkpoint(args.merged)
    if extra is not None:
        raise ConfigError(f"{args.merged}: merged checkpoint must not carry adapter state")
    report = audit_merge((state, adapter), merged, args.probe_seed, args.probe_count)
    path = Path(args.report) if args.report else _out_root(None) / "verify_report.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    return _report_and_verdict(report, path, dict(manifest.get("header") or {}))


def cmd_gradcheck(args):
    dims = _dims(args.dims) or ([8, 8, 16, 3] if args.model == "vit_toy" else [4, 6, 5, 3])
    method = parse_method(args.method)
    from .adapters import make_adapter

    state = build_reference_model(args.model, dims, seed=args.seed, init_std=0.5)
    adapter = perturb(make_adapter(state, method, seed=args.seed), scale=0.3, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    x = rng.standard_normal((args.batch, state.spec.in_dim))
    y = rng.integers(0, dims[-1], size=args.batch)
    errors = gradcheck(state, adapter, x, y, eps=args.eps, lam=args.lam)
    worst = max(errors.values()) if errors else 0.0
    invocation = {"model": args.model, "dims": dims, "method": method.to_dict(), "eps": args.eps,
                  "batch": args.batch, "lam": args.lam}
    doc = {"header": {"config_hash": config_hash(invocation), "seed": args.seed}, "invocation": invocation,
           "max_relative_error": worst, "per_parameter": errors, "tolerance": args.tol}
    if args.report:
        write_json(args.report, doc)
    print(f"gradcheck {args.model} + {method.label}: max relative error {worst:.3e} over {len(errors)} tensors "
          f"(tolerance {args.tol:g})")
    if not worst < args.tol:
        raise VerificationError(f"gradient check failed: {worst:.3e} >= {args.tol:g}")
    return 0


def cmd_params(args):
    if args.model == "vit_b":
        spec = model_spec("vit_b")
        dims = None
    else:
        dims = _dims(args.dims) or ([8, 16, 32, 3] if args.model == "vit_toy" else [2, 4, 2])
        spec = model_spec(args.model, dims)
    rows = []
    for text in args.methods or DEFAULT_METHODS:
        method = parse_method(text)
        if method.kind == "vpt" and spec.layers[0].kind != "embedding_patchify":
            continue
        c = count_params(spec, method)
        rows.append({"method": method.label, "method_config": method.to_dict(), **c,
                     "recalibration": recalibration_param_count(spec, method)})
    lines = [f"{'method':<22}{'trainable':>12}{'total':>14}{'ratio':>10}"]
    lines += [f"{r['method']:<22}{r['trainable']:>12}{r['total']:>14}{100 * r['ratio']:>9.2f}%" for r in rows]
    print("\n".join(lines))
    invocation = {"model": args.model, "dims": dims, "methods": [r["method_config"] for r in rows]}
    out = Path(args.out) if args.out else _out_root(None) / "params.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(out, {"schema": "sanpeft.params/1", "header": {"config_hash": config_hash(invocation), "seed": None},
                     "model": args.model, "dims": dims, "rows": rows})
    return 0


def cmd_compare(args):
    cfg = apply_overrides(load_config(args.config), args.set)
    shared, methods, seeds = split_compare(cfg)
    if args.seeds:
        seeds = args.seeds
    configs = [TrainConfig.from_dict({**shared, "method": m.to_dict()}) for m in methods]
    out = Path(args.out) if args.out else _out_root(None) / "compare.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    report = compare(configs, out, seeds=seeds)
    print(format_table(report["rows"]))
    print(f"report {out}")
    return 0


def cmd_gen_data(args):
    opts = apply_overrides({}, args.set)
    ds = gen_synthetic(args.task, args.n, args.seed, **opts)
    out = Path(args.out) if args.out else _out_root(None) / f"{args.task}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.format == "csv_labeled":
        write_csv(out, ds)
        print(f"{args.task}: {len(ds.y)} rows x {ds.dim} features -> {out}")
    else:
        labels = out.with_name(out.name + ".labels")
        write_idx(out, ds.x)
        write_idx(labels, ds.y.astype(np.uint8))
        print(f"{args.task}: {len(ds.y)} samples -> {out}, labels -> {labels}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="sanpeft", description="Parameter-efficient fine-tuning with scaling-factor propagation.")
    p.add_argument("--version", action="version", version=f"sanpeft {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_args(sp):
        sp.add_argument("--config", required=True, help=f"config file or preset ({', '.join(preset_names())})")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted-key override")
        sp.add_argument("--out", help="output location (default: $SANPEFT_OUT or ./runs)")

    def probe_args(sp):
        sp.add_argument("--probe-seed", type=int, default=0)
        sp.add_argument("--probe-count", type=int, default=64)

    sp = sub.add_parser("train", help="fine-tune one configuration")
    config_args(sp)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("merge", help="fold a trained adapter into the base weights")
    sp.add_argument("--checkpoint", required=True, help="adapted checkpoint manifest")
    sp.add_argument("--out", help="merged checkpoint prefix (default: beside the input)")
    probe_args(sp)
    sp.set_defaults(func=cmd_merge)

    sp = sub.add_parser("verify", help="audit an adapted/merged checkpoint pair")
    sp.add_argument("--adapted", required=True)
    sp.add_argument("--merged", required=True)
    sp.add_argument("--report")
    probe_args(sp)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    sp.add_argument("--model", choices=("mlp_chain", "vit_toy"), default="vit_toy")
    sp.add_argument("--method", default="san")
    sp.add_argument("--dims")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--batch", type=int, default=4)
    sp.add_argument("--eps", type=float, default=1e-5)
    sp.add_argument("--lam", type=float, default=0.0)
    sp.add_argument("--tol", type=float, default=GRADCHECK_TOL)
    sp.add_argument("--report")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("params", help="trainable-parameter budgets per method")
    sp.add_argument("--model", choices=("mlp_chain", "vit_toy", "vit_b"), default="vit_toy")
    sp.add_argument("--dims")
    sp.add_argument("--methods", nargs="+")
    sp.add_argument("--out", help="JSON twin of the table")
    sp.set_defaults(func=cmd_params)

    sp = sub.add_parser("compare", help="run several methods over seeds")
    config_args(sp)
    sp.add_argument("--seeds", type=int, nargs="+")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("gen-data", help="write a synthetic dataset")
    sp.add_argument("--task", choices=TASKS, required=True)
    sp.add_argument("--n", type=int, default=400)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--format", choices=("csv_labeled", "idx_images"), default="csv_labeled")
    sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="task option")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SanPeftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc.filename or exc}: file not found", file=sys.stderr)
        return 1
    except (OSError, KeyError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
