"""Command-line surface: prune, train, bench, verify, init-inspect.

Exit codes: 0 success, 1 verification failure, 2 I/O or format problem,
3 numeric failure, 4 counter-vs-formula mismatch. The default seed is 0,
overridable by the LORS_SEED environment variable; every subcommand also
accepts --config pointing at a JSON file of flag defaults (explicit flags
win).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .errors import (
    ArgumentError,
    CheckpointFormatError,
    NumericError,
    ShapeError,
)
from .prune import (
    CalibrationBatch,
    SparseWeight,
    prune_activation_scaled,
    prune_magnitude,
    prune_two_four,
    sparsity,
)
from .adapters import FAULT_INJECTION, VARIANTS, make_layer, merge
from .initialization import (
    InitSpec,
    MemoryGauge,
    STRATEGIES,
    init_gradient_svd,
)
from .train import (
    Dataset,
    ToyModel,
    TrainConfig,
    evaluate,
    finetune,
    make_cluster_data,
    make_teacher_data,
    model_from_weights,
    random_dense_weights,
)
from .bench import run_bench, run_suites, SUITES
from .checkpoint import load_checkpoint, model_weight_names, save_checkpoint

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_IO = 2
EXIT_NUMERIC = 3
EXIT_COUNTER = 4

FAULTS = {
    "lors-backward-sign": "lors_backward_sign_flip",
    "cost-model-off-by-one": "cost_model_off_by_one",
}


def _env_seed() -> int:
    raw = os.environ.get("LORS_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise ArgumentError(f"LORS_SEED must be an integer, got {raw!r}")


def _parse_shapes(text: str):
    shapes = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        pieces = part.split(",")
        if len(pieces) != 4:
            raise ArgumentError(
                f"shape {part!r} must be R,C,L,r (four comma-separated integers)"
            )
        try:
            shapes.append(tuple(int(p) for p in pieces))
        except ValueError:
            raise ArgumentError(f"shape {part!r} has non-integer entries")
    if not shapes:
        raise ArgumentError("no shapes given")
    return shapes


def _model_from_checkpoint(tensors, variant: str, rank: int, alpha: float,
                           head: str = "regression") -> ToyModel:
    names = model_weight_names(tensors)
    layers = []
    for i, name in enumerate(names):
        base = SparseWeight(tensors[name].copy())
        bias_name = f"layers.{i}.bias"
        bias = tensors[bias_name].copy() if bias_name in tensors else None
        layers.append(make_layer(base, rank=rank, variant=variant, alpha=alpha,
                                 bias=bias, name=f"layers.{i}"))
    return ToyModel(layers, head=head)


def _task_dataset(task: str, model: ToyModel, seed: int, n: int) -> Dataset:
    if task == "teacher":
        dims = [model.in_features] + [ly.out_features for ly in model.layers]
        teacher = model_from_weights(random_dense_weights(seed + 7919, dims),
                                     variant="lors", rank=1)
        return make_teacher_data(teacher, seed=seed + 104729, n=n)
    if task == "clusters":
        return make_cluster_data(seed=seed + 104729, k=model.out_features,
                                 dim=model.in_features, n=n)
    raise ArgumentError(f"unknown task {task!r}, expected teacher or clusters")


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------

def cmd_prune(args) -> int:
    tensors = load_checkpoint(args.input)
    calib = None
    if args.method == "activation":
        if not args.calib:
            raise ArgumentError("method 'activation' requires --calib")
        calib_tensors = load_checkpoint(args.calib)
        if "calib" not in calib_tensors:
            raise CheckpointFormatError(
                f"calibration checkpoint {args.calib} has no 'calib' tensor"
            )
        calib = CalibrationBatch(calib_tensors["calib"])

    out = {}
    summary = {"method": args.method, "tensors": {}}
    for name, m in tensors.items():
        if not name.endswith(".weight"):
            out[name] = m
            continue
        if args.method == "magnitude":
            sw = prune_magnitude(m, args.ratio)
        elif args.method == "activation":
            sw = prune_activation_scaled(m, calib, args.ratio)
        else:
            sw = prune_two_four(m)
        out[name] = sw.values
        summary["tensors"][name] = {
            "rows": m.rows, "cols": m.cols,
            "sparsity": sparsity(sw), "pattern": sw.pattern,
        }
    if not summary["tensors"]:
        raise CheckpointFormatError("checkpoint holds no '.weight' tensors to prune")
    save_checkpoint(args.output, out)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_train(args) -> int:
    tensors = load_checkpoint(args.ckpt)
    head = "classification" if args.task == "clusters" else "regression"
    model = _model_from_checkpoint(tensors, args.variant, args.rank, args.alpha,
                                   head=head)
    dataset = _task_dataset(args.task, model, args.seed, args.samples)
    init = InitSpec(strategy=args.init, seed=args.seed, std=args.std)
    config = TrainConfig(steps=args.steps, batch_size=args.batch_size,
                         lr=args.lr, optimizer=args.optimizer,
                         variant=args.variant, init=init, seed=args.seed)
    _, trace = finetune(model, dataset, config)

    merged_tensors = {}
    for i, layer in enumerate(model.layers):
        merged_tensors[f"layers.{i}.weight"] = merge(layer).values
        if layer.bias is not None:
            merged_tensors[f"layers.{i}.bias"] = layer.bias
    save_checkpoint(args.out, merged_tensors)

    metrics_path = args.metrics or (str(args.out) + ".metrics.csv")
    trace.save_csv(metrics_path)

    summary = {
        "steps": args.steps,
        "variant": args.variant,
        "init": args.init,
        "final_loss": trace.final_loss if trace.rows else None,
        "eval": evaluate(model, dataset),
        "out": str(args.out),
        "metrics": str(metrics_path),
    }
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_bench(args) -> int:
    shapes = _parse_shapes(args.shapes)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    if args.inject_fault:
        FAULT_INJECTION[FAULTS[args.inject_fault]] = True
    try:
        report = run_bench(shapes, variants, repeats=args.repeats,
                           seed=args.seed, predict_only=args.predict_only)
    finally:
        if args.inject_fault:
            FAULT_INJECTION[FAULTS[args.inject_fault]] = False
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(report.csv_text())
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(report.json_obj(), fh, indent=2)
            fh.write("\n")
    print(report.csv_text(), end="")
    mismatches = report.mismatches()
    if mismatches:
        for cell in mismatches:
            print(f"counter mismatch: {cell}", file=sys.stderr)
        return EXIT_COUNTER
    return EXIT_OK


def cmd_verify(args) -> int:
    names = list(SUITES) if args.suite == "all" else [
        s.strip() for s in args.suite.split(",") if s.strip()]
    if args.inject_fault:
        FAULT_INJECTION[FAULTS[args.inject_fault]] = True
    try:
        results = run_suites(names)
    finally:
        if args.inject_fault:
            FAULT_INJECTION[FAULTS[args.inject_fault]] = False
    width = max(len(f"{r.suite}: {r.name}") for r in results)
    failures = 0
    for r in results:
        status = "pass" if r.ok else "FAIL"
        label = f"{r.suite}: {r.name}"
        detail = f"  ({r.detail})" if r.detail else ""
        print(f"{label:<{width}}  {status}{detail}")
        if not r.ok:
            failures += 1
    print(f"{len(results) - failures}/{len(results)} checks passed")
    return EXIT_OK if failures == 0 else EXIT_VERIFY


def cmd_init_inspect(args) -> int:
    tensors = load_checkpoint(args.ckpt)
    model = _model_from_checkpoint(tensors, "lors", args.rank, args.alpha)
    dataset = _task_dataset(args.task, model, args.seed, max(args.samples, 32))
    probe = dataset.head(32)
    gauge = MemoryGauge()
    diagnostics = []
    init_gradient_svd(model, probe, r=args.rank, gauge=gauge,
                      diagnostics=diagnostics)
    report = {
        "layers": diagnostics,
        "peak_extra_elements": gauge.peak,
        "max_layer_elements": max(
            ly.out_features * ly.in_features for ly in model.layers),
    }
    print(json.dumps(report, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    seed = _env_seed()
    parser = argparse.ArgumentParser(
        prog="lors",
        description="Sparsity-preserving low-rank adapter toolkit",
    )
    subparsers = parser.add_subparsers(dest="command")
    submap = {}

    def add(name, handler, help_text):
        sub = subparsers.add_parser(name, help=help_text)
        sub.set_defaults(handler=handler)
        sub.add_argument("--config", default=None,
                         help="JSON file of flag defaults (explicit flags win)")
        submap[name] = sub
        return sub

    p = add("prune", cmd_prune, "prune '.weight' tensors in a checkpoint")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--method", choices=("magnitude", "activation", "two_four"),
                   default="magnitude")
    p.add_argument("--ratio", type=float, default=0.5)
    p.add_argument("--calib", default=None,
                   help="checkpoint holding a 'calib' tensor (activation method)")

    t = add("train", cmd_train, "finetune adapters over a sparse checkpoint")
    t.add_argument("--ckpt", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--metrics", default=None, help="metrics CSV path")
    t.add_argument("--variant", choices=VARIANTS, default="lors")
    t.add_argument("--init", choices=STRATEGIES, default="zero_A_zero_B")
    t.add_argument("--task", choices=("teacher", "clusters"), default="teacher")
    t.add_argument("--steps", type=int, default=100)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--samples", type=int, default=512,
                   help="synthetic dataset size")
    t.add_argument("--lr", type=float, default=1e-2)
    t.add_argument("--optimizer", choices=("sgd", "adaptive"), default="sgd")
    t.add_argument("--rank", type=int, default=4)
    t.add_argument("--alpha", type=float, default=2.0)
    t.add_argument("--std", type=float, default=0.02,
                   help="random-init standard deviation")
    t.add_argument("--seed", type=int, default=seed)

    b = add("bench", cmd_bench, "compare measured counters with formulas")
    b.add_argument("--shapes", default="64,64,64,16",
                   help="semicolon-separated R,C,L,r tuples")
    b.add_argument("--variants", default=",".join(VARIANTS))
    b.add_argument("--repeats", type=int, default=1)
    b.add_argument("--csv", default=None)
    b.add_argument("--json", default=None)
    b.add_argument("--predict-only", action="store_true",
                   help="emit only closed-form predictions (no measurement)")
    b.add_argument("--seed", type=int, default=seed)
    b.add_argument("--inject-fault", choices=sorted(FAULTS), default=None,
                   help="debug hook: corrupt a computation to test failure paths")

    v = add("verify", cmd_verify, "run oracle suites and print a pass/fail table")
    v.add_argument("--suite", default="all",
                   help=f"comma-separated subset of {sorted(SUITES)}, or 'all'")
    v.add_argument("--inject-fault", choices=sorted(FAULTS), default=None,
                   help="debug hook: corrupt a computation to test failure paths")

    i = add("init-inspect", cmd_init_inspect,
            "dump per-layer SVD residuals for gradient-based init")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--rank", type=int, default=4)
    i.add_argument("--alpha", type=float, default=2.0)
    i.add_argument("--task", choices=("teacher", "clusters"), default="teacher")
    i.add_argument("--samples", type=int, default=64)
    i.add_argument("--seed", type=int, default=seed)

    return parser, submap


def main(argv=None) -> int:
    try:
        parser, submap = build_parser()
    except ArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_IO

    if args.command is None:
        parser.print_help()
        return EXIT_IO

    if getattr(args, "config", None):
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            print(f"error: cannot read config {args.config}: {exc}", file=sys.stderr)
            return EXIT_IO
        if not isinstance(cfg, dict):
            print("error: config file must hold a JSON object", file=sys.stderr)
            return EXIT_IO
        sub = submap[args.command]
        valid = {a.dest for a in sub._actions}
        unknown = sorted(set(cfg) - valid)
        if unknown:
            print(f"error: config keys not recognized: {unknown}", file=sys.stderr)
            return EXIT_IO
        sub.set_defaults(**cfg)
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:
            return exc.code if isinstance(exc.code, int) else EXIT_IO

    try:
        return args.handler(args)
    except (CheckpointFormatError, ArgumentError, ShapeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
