"""Command-line front end.

Subcommands cover the library surface: build weights from a spec file,
fuse them for deployment, verify train/deploy equivalence, report costs
and shapes, run toy training, dump frequency profiles, and run the block
ablation ladder.

Exit codes: 0 success, 2 spec parse error, 3 weight-container error,
4 verification failure, 5 branch-merge error, 1 anything else.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .analyzer import branch_spectrum_report, count_flops, count_params, shape_trace
from .errors import (FmvitError, MergeError, SpecParseError, VerificationError,
                     WeightFormatError)
from .io import load_weights, read_model_spec, save_weights
from .model import calibrate_bn
from .reparam import fuse_model, verify_equivalence
from .tensor import Tensor
from .trainer import (TrainConfig, ablation_suite, evaluate, generate_dataset,
                      train, GENERATOR_KINDS, OPTIMIZERS)


def _table(headers, rows, fmt: str) -> str:
    cells = [[str(c) for c in row] for row in rows]
    if fmt == "columnar":
        return "\n".join("\t".join(r) for r in [list(headers)] + cells)
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h)
              for i, h in enumerate(headers)]
    def line(r):
        return "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
    sep = "  ".join("-" * w for w in widths)
    return "\n".join([line(headers), sep] + [line(r) for r in cells])


def _load_model(args, ms, need_weights: bool = False):
    """Build from the spec; load weights when given, else calibrate fresh."""
    if getattr(args, "weights", None):
        form, entries = load_weights(args.weights)
        model = ms.build(seed=args.seed)
        if form == "deployed":
            model = fuse_model(model)
        model.load_state_dict(entries)
        return model.eval(), form
    if need_weights:
        raise FmvitError("this command needs --weights")
    model = ms.build(seed=args.seed)
    rng = np.random.default_rng(args.seed)
    calib = Tensor(rng.standard_normal(
        (2, 3, args.input_size, args.input_size)).astype(np.float32))
    calibrate_bn(model, calib)
    return model.eval(), "training"


def cmd_build(args) -> int:
    ms = read_model_spec(args.spec)
    model, _ = _load_model(args, ms)
    save_weights(model, args.out)
    n = count_params(model).total_params
    print(f"built {ms.variant or ms.table.name}: {n} parameters -> {args.out}")
    return 0


def cmd_fuse(args) -> int:
    ms = read_model_spec(args.spec)
    model, form = _load_model(args, ms, need_weights=True)
    if form == "deployed":
        raise MergeError("weights are already in deployed form")
    fused = fuse_model(model)
    save_weights(fused, args.out)
    n = count_params(fused).total_params
    print(f"fused with {len(fused.fusion_passes)} merge passes: "
          f"{n} deployed parameters -> {args.out}")
    return 0


def cmd_verify(args) -> int:
    ms = read_model_spec(args.spec)
    models = []
    for path in (args.weights_a, args.weights_b):
        form, entries = load_weights(path)
        model = ms.build(seed=args.seed)
        if form == "deployed":
            model = fuse_model(model)
        model.load_state_dict(entries)
        models.append(model)
    report = verify_equivalence(models[0], models[1], n_samples=args.samples,
                                tolerance=args.tol, seed=args.seed,
                                input_hw=args.input_size)
    rows = [(name, f"{val:.3e}") for name, val in report.residuals.items()]
    print(_table(("layer", "max |a-b|"), rows, args.report_format))
    print(f"samples={report.samples} tolerance={report.tolerance:g} "
          f"assumption: {report.assumption}")
    print(f"verdict: {report.verdict} (max residual {report.max_residual:.3e})")
    return 0 if report.verdict == "pass" else 4


def cmd_analyze(args) -> int:
    ms = read_model_spec(args.spec)
    model, form = _load_model(args, ms)
    dims = (1, 3, args.input_size, args.input_size)
    cost = count_flops(model, dims)
    rows = [(r.path, r.kind, r.params, r.buffers, r.macs, r.adds,
             "x".join(str(d) for d in r.out_dims)) for r in cost.rows]
    print(_table(("layer", "kind", "params", "stats", "macs", "adds", "out"),
                 rows, args.report_format))
    print(f"form: {form}")
    print(f"totals: params={cost.total_params} (+{cost.total_buffers} running stats) "
          f"macs={cost.total_macs} (2x: {cost.total_macs_x2}) adds={cost.total_adds}")
    return 0


def cmd_train(args) -> int:
    ms = read_model_spec(args.spec)
    model, form = _load_model(args, ms)
    if form == "deployed":
        raise FmvitError("deployed weights have no norm layers left to train")
    data = generate_dataset(args.seed, args.samples, ms.classes,
                            (3, args.input_size, args.input_size), args.data_kind)
    cfg = TrainConfig(steps=args.steps, batch_size=args.batch, lr=args.lr,
                      optimizer=args.optimizer, warmup_steps=max(1, args.steps // 10),
                      weight_decay=args.weight_decay, seed=args.seed)
    history = train(model, data, cfg)
    result = evaluate(model, data)
    stride = max(1, len(history) // 10)
    rows = [(h["step"], f"{h['lr']:.2e}", f"{h['loss']:.4f}", f"{h['acc']:.3f}")
            for h in history[::stride]] + \
           [(history[-1]["step"], f"{history[-1]['lr']:.2e}",
             f"{history[-1]['loss']:.4f}", f"{history[-1]['acc']:.3f}")]
    print(_table(("step", "lr", "batch loss", "batch acc"), rows, args.report_format))
    print(f"train set: accuracy={result.accuracy:.4f} loss={result.mean_loss:.4f} "
          f"on {result.n_samples} samples")
    if args.out:
        save_weights(model, args.out)
        print(f"weights -> {args.out}")
    return 0


def cmd_spectrum(args) -> int:
    ms = read_model_spec(args.spec)
    model, _ = _load_model(args, ms)
    if args.image:
        arr = np.load(args.image).astype(np.float32)
        if arr.ndim == 3:
            arr = arr[None]
        x = Tensor(arr)
    else:
        rng = np.random.default_rng(args.seed)
        x = Tensor(rng.standard_normal(
            (1, 3, args.input_size, args.input_size)).astype(np.float32))
    profiles = branch_spectrum_report(model, x)
    rows = [(p.branch_id, p.kind, f"{p.low_freq_ratio:.4f}",
             " ".join(f"{b:.3f}" for b in p.radial_bins)) for p in profiles]
    text = _table(("branch", "kind", "low-freq", "radial bins (low to high)"),
                  rows, args.report_format)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        print(f"{len(profiles)} profiles -> {args.out}")
    else:
        print(text)
    return 0


def cmd_ablate(args) -> int:
    ms = read_model_spec(args.spec)
    variant = ms.variant if ms.variant else ms.table
    data = cfg = None
    if args.steps > 0:
        data = generate_dataset(args.seed, args.samples, ms.classes,
                                (3, args.input_size, args.input_size), args.data_kind)
        cfg = TrainConfig(steps=args.steps, batch_size=args.batch, lr=args.lr,
                          optimizer=args.optimizer,
                          warmup_steps=max(1, args.steps // 10),
                          weight_decay=args.weight_decay, seed=args.seed)
    rows = ablation_suite(variant, classes=ms.classes, dataset=data, config=cfg,
                          input_dims=(1, 3, args.input_size, args.input_size),
                          seed=args.seed)
    table = [(r.name,
              "+" if r.use_fmb else "-", "+" if r.use_gmlp else "-",
              "+" if r.use_rlmhsa else "-",
              r.train_params, r.deployed_params, r.attn_params, r.macs,
              f"{r.accuracy:.3f}" if r.accuracy is not None else "n/a")
             for r in rows]
    print(_table(("arm", "fmb", "gmlp", "rlmhsa", "train params",
                  "deployed", "attn params", "macs", "acc"),
                 table, args.report_format))
    return 0


def _add_common(p, weights: str | None = None, out: bool = False):
    p.add_argument("--spec", required=True, help="model spec file")
    if weights is not None:
        p.add_argument("--weights", required=(weights == "required"),
                       help="weight container")
    if out:
        p.add_argument("--out", help="output path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--input-size", type=int, default=64, dest="input_size")
    p.add_argument("--report-format", choices=("text", "columnar"),
                   default="text", dest="report_format")


def _add_train_flags(p):
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=0.002)
    p.add_argument("--samples", type=int, default=128)
    p.add_argument("--optimizer", choices=OPTIMIZERS, default="adamw-lite")
    p.add_argument("--weight-decay", type=float, default=0.01, dest="weight_decay")
    p.add_argument("--data-kind", choices=GENERATOR_KINDS,
                   default="gabor-texture-classes", dest="data_kind")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fmvit",
                                 description="hybrid conv/attention blocks with "
                                             "branch fusion for deployment")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="initialize weights from a spec file")
    _add_common(p, out=False)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_build)

    p = sub.add_parser("fuse", help="merge every branch bundle for deployment")
    _add_common(p, weights="required")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_fuse)

    p = sub.add_parser("verify", help="prove two weight sets equivalent")
    p.add_argument("weights_a")
    p.add_argument("weights_b")
    _add_common(p)
    p.add_argument("--samples", type=int, default=16)
    p.add_argument("--tol", type=float, default=1e-3)
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("analyze", help="parameter and arithmetic cost report")
    _add_common(p, weights="optional")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("train", help="fit a synthetic dataset")
    _add_common(p, weights="optional", out=True)
    _add_train_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("spectrum", help="radial frequency profile of block branches")
    _add_common(p, weights="optional", out=True)
    p.add_argument("--image", help="npy array to probe with (CHW or NCHW)")
    p.set_defaults(fn=cmd_spectrum)

    p = sub.add_parser("ablate", help="cost/accuracy ladder over block toggles")
    _add_common(p)
    _add_train_flags(p)
    p.set_defaults(fn=cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except SpecParseError as e:
        print(f"spec error: {e}", file=sys.stderr)
        return 2
    except WeightFormatError as e:
        print(f"weight container error: {e}", file=sys.stderr)
        return 3
    except VerificationError as e:
        print(f"verification error: {e}", file=sys.stderr)
        return 4
    except MergeError as e:
        print(f"merge error: {e}", file=sys.stderr)
        return 5
    except FmvitError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
