"""Command-line front end.

Sub-commands are thin wrappers over the library; every run writes a
``run_config.json`` manifest of its resolved options into the output
directory so results are reproducible from the manifest plus the seed.

Exit codes: 0 success, 2 usage error, 3 validation error, 4 numeric error,
5 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import dataio, nnexec, prune, qat, quantize
from .calib import CalibConfig, calibrate, dump_kl_csv, load_profile, save_profile
from .errors import NumericError, QuantKitError, ValidationError
from .graph import load_model, save_model
from .kernels import BACKEND
from .models import ARCHITECTURES


def _positive_int(text):
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


def _positive_float(text):
    v = float(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return v


def _tolerance(text):
    v = float(text)
    if v < 1.0:
        raise argparse.ArgumentTypeError(f"tolerance must be >= 1, got {text}")
    return v


def _sparsity(text):
    v = float(text)
    if not 0.0 <= v < 1.0:
        raise argparse.ArgumentTypeError(f"sparsity must be in [0, 1), got {text}")
    return v


def _bits(text):
    v = int(text)
    if not 2 <= v <= 8:
        raise argparse.ArgumentTypeError(f"bitwidth must be in [2, 8], got {text}")
    return v


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    return int(os.environ.get("QUANTKIT_SEED", "0"))


def _write_run_config(out_dir, command, args):
    os.makedirs(out_dir, exist_ok=True)
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    resolved["command"] = command
    resolved["seed"] = _seed(args)
    resolved["backend"] = BACKEND
    with open(os.path.join(out_dir, "run_config.json"), "w") as fh:
        json.dump(resolved, fh, indent=1, sort_keys=True, default=str)
        fh.write("\n")


def _load_any_model(path):
    g = load_model(path)
    if "quantization" in g.meta:
        return quantize.load_quantized(path)
    return g


def cmd_gen_data(args):
    _write_run_config(args.out, "gen-data", args)
    train, evals = nnexec.make_toy_dataset(
        _seed(args), class_count=args.classes, per_class=args.per_class,
        image_size=args.image_size, noise=args.noise)
    dataio.save_dataset(train, os.path.join(args.out, "train"))
    dataio.save_dataset(evals, os.path.join(args.out, "eval"))
    print(f"wrote {len(train)} train + {len(evals)} eval samples to {args.out}")
    return 0


def cmd_train(args):
    _write_run_config(args.out, "train", args)
    train = dataio.load_dataset(os.path.join(args.data, "train"))
    evals = dataio.load_dataset(os.path.join(args.data, "eval"), class_count=train.class_count)
    g = ARCHITECTURES[args.arch](classes=train.class_count,
                                 input_shape=tuple(train.x.shape[1:]), seed=_seed(args))
    cfg = nnexec.TrainConfig(
        lr=args.lr, epochs=args.epochs, batch_size=args.batch_size,
        momentum=args.momentum, seed=_seed(args), augment=args.augment,
        lr_decay_factor=args.decay_factor,
        lr_decay_epochs=tuple(args.decay_epochs or ()))
    trained = nnexec.train(g, train, cfg)
    save_model(trained, args.out)
    metrics = nnexec.evaluate(trained, evals)
    doc = {"top1": metrics.top1, "top5": metrics.top5, "n": metrics.n}
    with open(os.path.join(args.out, "metrics.json"), "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    print(json.dumps(doc))
    return 0


def cmd_eval(args):
    data = dataio.load_dataset(os.path.join(args.data, args.split))
    model = _load_any_model(args.model)
    if isinstance(model, quantize.QuantizedModel):
        metrics, audits = quantize.evaluate_quantized(model, data)
        doc = {"top1": metrics.top1, "top5": metrics.top5, "n": metrics.n,
               "overflow": quantize.audit_report(audits)}
    else:
        metrics = nnexec.evaluate(model, data)
        doc = {"top1": metrics.top1, "top5": metrics.top5, "n": metrics.n}
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        with open(args.out, "w") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")
    print(json.dumps(doc))
    return 0


def _calib_config(args):
    return CalibConfig(tolerance=args.tolerance, batches=args.batches,
                       bitwidth=args.abits, batch_size=args.batch_size)


def cmd_calibrate(args):
    data = dataio.load_dataset(os.path.join(args.data, "train"))
    g = load_model(args.model)
    folded, _ = quantize.fold_graph(g)
    planned = quantize.plan_placement(
        folded, quantize_add_inputs=args.quantize_add_inputs, force_signed=args.signed_only)
    profile = calibrate(planned, data, _calib_config(args), threads=args.threads)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    save_profile(profile, args.out)
    if args.dump_kl:
        dump_kl_csv(profile, args.dump_kl)
    print(f"calibrated {len(profile.sites)} sites -> {args.out}")
    return 0


def cmd_quantize(args):
    _write_run_config(args.out, "quantize", args)
    data = dataio.load_dataset(os.path.join(args.data, "train"))
    g = load_model(args.model)
    folded, _ = quantize.fold_graph(g)
    planned = quantize.plan_placement(
        folded, quantize_add_inputs=args.quantize_add_inputs, force_signed=args.signed_only)
    quantize.check_accum_mode(args.accum, args.abits, args.wbits)
    if args.profile:
        profile = load_profile(args.profile)
    else:
        profile = calibrate(planned, data, _calib_config(args), threads=args.threads)
    qm = quantize.build_quantized(planned, profile, weight_bits=args.wbits,
                                  granularity=args.granularity, accum_mode=args.accum)
    quantize.save_quantized(qm, args.out)
    audits = {}
    for start in range(0, min(len(data), args.batches * args.batch_size), args.batch_size):
        _, a = quantize.run_quantized(qm, data.x[start:start + args.batch_size])
        for k, v in a.items():
            audits[k] = audits.get(k, quantize.OverflowAudit()) + v
    report = quantize.audit_report(audits)
    with open(os.path.join(args.out, "overflow_report.json"), "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(json.dumps({"model": args.out, "overflow_total": report["total"]}))
    return 0


def cmd_pipeline(args):
    _write_run_config(args.out, "pipeline", args)
    train = dataio.load_dataset(os.path.join(args.data, "train"))
    evals = dataio.load_dataset(os.path.join(args.data, "eval"), class_count=train.class_count)
    model = load_model(args.model)
    ft_cfg = nnexec.TrainConfig(lr=args.ft_lr, epochs=args.ft_epochs,
                                batch_size=args.batch_size, seed=_seed(args),
                                augment="weak_crop")
    qat_cfg = qat.QATConfig(epochs=args.qat_epochs, lr=args.qat_lr,
                            batch_size=args.batch_size, seed=_seed(args),
                            decay_epoch=max(1, args.qat_epochs // 2))
    calib_cfg = _calib_config(args)
    reports = []
    for s in args.sparsity:
        state = prune.run_pipeline(model, s, train, evals, ft_cfg, calib_cfg, qat_cfg,
                                   weight_bits=args.wbits, granularity=args.granularity,
                                   accum_mode=args.accum)
        sub = os.path.join(args.out, f"sparsity_{s:g}")
        reports.append(prune.write_report(state, sub))
        save_model(state.m2, os.path.join(sub, "m2"))
        quantize.save_quantized(state.m3, os.path.join(sub, "m3"))
        quantize.save_quantized(state.m4, os.path.join(sub, "m4"))
        print(json.dumps({"sparsity": s, "stages": state.metrics}))
    prune.write_sparsity_table(reports, os.path.join(args.out, "table_sparsity.csv"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="quantkit",
                                description="Desk-scale post-training quantization toolkit")
    p.add_argument("--threads", type=_positive_int, default=1,
                   help="parallelism cap for library calls")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a toy classification dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--classes", type=_positive_int, default=10)
    g.add_argument("--per-class", type=_positive_int, default=200)
    g.add_argument("--image-size", type=_positive_int, default=10)
    g.add_argument("--noise", type=_positive_float, default=0.35)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a toy architecture")
    t.add_argument("--data", required=True)
    t.add_argument("--arch", choices=sorted(ARCHITECTURES), default="toy_resnet")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=_positive_int, default=20)
    t.add_argument("--lr", type=_positive_float, default=0.05)
    t.add_argument("--batch-size", type=_positive_int, default=32)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--augment", choices=nnexec.AUGMENT_MODES, default="aggressive_crop")
    t.add_argument("--decay-factor", type=_positive_float, default=10.0)
    t.add_argument("--decay-epochs", type=int, nargs="*", default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a model (fp or quantized)")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "eval"), default="eval")
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("calibrate", help="KL-tolerance activation calibration")
    c.add_argument("--model", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--tolerance", type=_tolerance, default=1.3)
    c.add_argument("--batches", type=_positive_int, default=8)
    c.add_argument("--abits", type=_bits, default=8)
    c.add_argument("--batch-size", type=_positive_int, default=32)
    c.add_argument("--signed-only", action="store_true")
    c.add_argument("--quantize-add-inputs", action="store_true")
    c.add_argument("--out", required=True)
    c.add_argument("--dump-kl", default=None, metavar="DIR")
    c.set_defaults(func=cmd_calibrate)

    q = sub.add_parser("quantize", help="build an integer model per the guideline")
    q.add_argument("--model", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--wbits", type=_bits, default=8)
    q.add_argument("--abits", type=_bits, default=8)
    q.add_argument("--granularity", choices=("layer", "channel"), default="channel")
    q.add_argument("--accum", choices=("int16", "int32"), default="int32")
    q.add_argument("--signed-only", action="store_true",
                   help="ablation: signed quantization even after ReLU")
    q.add_argument("--quantize-add-inputs", action="store_true",
                   help="ablation: quantize the inputs of element-wise Add")
    q.add_argument("--tolerance", type=_tolerance, default=1.3)
    q.add_argument("--batches", type=_positive_int, default=8)
    q.add_argument("--batch-size", type=_positive_int, default=32)
    q.add_argument("--profile", default=None,
                   help="reuse a saved calibration profile instead of calibrating")
    q.set_defaults(func=cmd_quantize)

    pl = sub.add_parser("pipeline", help="prune -> fine-tune -> PTQ -> QAT")
    pl.add_argument("--model", required=True)
    pl.add_argument("--data", required=True)
    pl.add_argument("--out", required=True)
    pl.add_argument("--sparsity", type=_sparsity, action="append", required=True)
    pl.add_argument("--ft-epochs", type=_positive_int, default=4)
    pl.add_argument("--ft-lr", type=_positive_float, default=5e-3)
    pl.add_argument("--qat-epochs", type=_positive_int, default=20)
    pl.add_argument("--qat-lr", type=_positive_float, default=5e-4)
    pl.add_argument("--tolerance", type=_tolerance, default=1.3)
    pl.add_argument("--batches", type=_positive_int, default=8)
    pl.add_argument("--batch-size", type=_positive_int, default=32)
    pl.add_argument("--wbits", type=_bits, default=8)
    pl.add_argument("--abits", type=_bits, default=8)
    pl.add_argument("--granularity", choices=("layer", "channel"), default="channel")
    pl.add_argument("--accum", choices=("int16", "int32"), default="int32")
    pl.add_argument("--seed", type=int, default=None)
    pl.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except QuantKitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
