"""Command-line front end: every experiment protocol as one subcommand.

Each run writes a JSON run-manifest next to its primary output (override
with --manifest) recording the resolved configuration, seeds, input/output
checksums, and duration; re-running the recorded argv reproduces the outputs
byte-identically.
"""

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

from . import __version__
from .analysis import avg_cross_lingual_similarity, emit_report
from .bank import LayerBank, load_params, read_bank, save_params, write_bank
from .fusion import BaselineSystem, LayerPair, build_fusion_system
from .gate import GATE_MODES, VARIANTS
from .gradcheck import classification_pipeline, finite_difference_check
from .synthetic import SyntheticTaskSpec, generate_task
from .training import (
    TrainConfig,
    evaluate,
    full_scale_config,
    init_head,
    layer_sweep,
    train,
)


def _parse_int_list(text):
    """Accept '3', '1,4,7', or an inclusive range '1..12'."""
    text = text.strip()
    try:
        if ".." in text:
            first, last = text.split("..", 1)
            first, last = int(first), int(last)
            if last < first:
                raise ValueError
            return list(range(first, last + 1))
        return [int(part) for part in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected an integer, comma list, or 'a..b' range, got {text!r}"
        ) from None


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def _path_entries(paths):
    entries = []
    for path in paths:
        path = Path(path)
        entry = {"path": str(path)}
        if path.exists():
            entry["sha256"] = _sha256(path)
        entries.append(entry)
    return entries


def _write_manifest(args, subcommand, config, inputs, outputs, started):
    if args.manifest:
        target = Path(args.manifest)
    elif outputs:
        first = Path(outputs[0])
        target = first.with_name(first.name + ".manifest.json")
    else:
        target = Path(f"{subcommand}.manifest.json")
    doc = {
        "subcommand": subcommand,
        "argv": list(args.raw_argv),
        "config": config,
        "seeds": config.get("seed", config.get("seeds")),
        "inputs": _path_entries(inputs),
        "outputs": _path_entries(outputs),
        "duration_seconds": round(time.monotonic() - started, 6),
        "version": __version__,
    }
    target.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return target


def _train_config(args):
    # Precedence: preset defaults < --train-config JSON < explicit flags.
    base = full_scale_config() if args.preset == "full-scale" else TrainConfig()
    doc = base.to_dict()
    if getattr(args, "train_config", None):
        doc.update(json.loads(Path(args.train_config).read_text(encoding="utf-8")))
    cfg = TrainConfig.from_dict(doc)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.batch_size is not None:
        cfg.batch_size = args.batch_size
    if args.learning_rate is not None:
        cfg.learning_rate = args.learning_rate
    if args.weight_decay is not None:
        cfg.weight_decay = args.weight_decay
    return cfg


def _add_train_flags(parser):
    parser.add_argument("--seed", type=int, default=None,
                        help="run seed; all streams derive from it (default 0)")
    parser.add_argument("--preset", choices=("desk", "full-scale"), default="desk",
                        help="hyper-parameter preset (desk-scale default, or full-scale lr 2e-5)")
    parser.add_argument("--train-config", default=None,
                        help="JSON file with train config fields; flags override it")
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--batch-size", type=int, default=None)
    parser.add_argument("--learning-rate", type=float, default=None)
    parser.add_argument("--weight-decay", type=float, default=None)


def _cmd_gen_task(args):
    started = time.monotonic()
    if args.spec:
        spec_doc = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        spec = SyntheticTaskSpec.from_dict(spec_doc)
    else:
        spec = SyntheticTaskSpec()
    if args.seed is not None:
        spec = SyntheticTaskSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    source, target = generate_task(spec)
    write_bank(source, args.out_src)
    write_bank(target, args.out_tgt)
    print(f"wrote {args.out_src} and {args.out_tgt}: "
          f"{source.n_layers} layers, shape {source.shape}")
    _write_manifest(
        args, "gen-task", {"spec": spec.to_dict(), "seed": spec.seed},
        inputs=[args.spec] if args.spec else [],
        outputs=[args.out_src, args.out_tgt], started=started,
    )
    return 0


def _cmd_inspect_bank(args):
    started = time.monotonic()
    bank = read_bank(args.bank)
    sentences, tokens, channels = bank.shape
    print(f"bank {args.bank}")
    print(f"  layers: {bank.n_layers}")
    print(f"  sentences: {sentences}  tokens: {tokens}  channels: {channels}")
    splits = sorted(set(bank.splits))
    print("  splits: " + ", ".join(f"{s}={bank.split_indices(s).size}" for s in splits))
    languages = sorted(set(bank.languages))
    print("  languages: " + ", ".join(languages))
    counts = {int(label): int((bank.labels == label).sum()) for label in sorted(set(bank.labels))}
    print(f"  labels: {counts}")
    _write_manifest(args, "inspect-bank", {"bank": str(args.bank)},
                    inputs=[args.bank], outputs=[], started=started)
    return 0


def _cmd_fuse(args):
    started = time.monotonic()
    bank = read_bank(args.bank)
    system, _ = load_params(args.params)
    rows = list(range(bank.shape[0]))
    fused = system.fused_batch(bank, rows, training=False)
    out_bank = LayerBank(
        layers=[fused.data],
        labels=bank.labels,
        languages=list(bank.languages),
        splits=list(bank.splits),
    )
    write_bank(out_bank, args.out)
    print(f"wrote fused bank {args.out} ({system.config_id()})")
    _write_manifest(
        args, "fuse", {"system": system.config_id(), "bank": str(args.bank)},
        inputs=[args.bank, args.params], outputs=[args.out], started=started,
    )
    return 0


def _build_system(args, channels, n_layers, seed):
    upper = args.upper if args.upper is not None else n_layers
    if args.baseline:
        return BaselineSystem(upper=upper)
    return build_fusion_system(
        LayerPair(args.lower, upper), channels,
        variant=args.variant, mode=args.gate_mode, seed=seed,
    )


def _cmd_train(args):
    started = time.monotonic()
    source = read_bank(args.src)
    target = read_bank(args.tgt) if args.tgt else None
    cfg = _train_config(args)
    system = _build_system(args, source.shape[2], source.n_layers, cfg.seed)
    head = init_head(source.shape[2], source.num_classes, seed=cfg.seed)
    curve = train(system, head, source, cfg)
    if curve:
        print(f"train loss: first={curve[0]:.6f} last={curve[-1]:.6f}")
    on_source = evaluate(system, head, source, "test")
    print(f"source test: acc={on_source.accuracy:.4f} f1={on_source.micro_f1:.4f}")
    results = {"source": {"accuracy": on_source.accuracy, "micro_f1": on_source.micro_f1}}
    if target is not None:
        on_target = evaluate(system, head, target, "test")
        print(f"target test: acc={on_target.accuracy:.4f} f1={on_target.micro_f1:.4f}")
        results["target"] = {"accuracy": on_target.accuracy, "micro_f1": on_target.micro_f1}
    save_params(system, head, args.out)
    config = {
        "system": system.config_id(),
        "variant": None if args.baseline else args.variant,
        "gate_mode": None if args.baseline else args.gate_mode,
        "train": cfg.__dict__,
        "seed": cfg.seed,
    }
    inputs = [args.src] + ([args.tgt] if args.tgt else [])
    _write_manifest(args, "train", config, inputs=inputs, outputs=[args.out], started=started)
    return 0


def _cmd_sweep(args):
    started = time.monotonic()
    source = read_bank(args.src)
    target = read_bank(args.tgt)
    cfg = _train_config(args)
    layers = args.layers if args.layers is not None else list(range(1, source.n_layers + 1))
    report = layer_sweep(
        source, target, layers, cfg,
        variant=args.variant, mode=args.gate_mode, upper=args.upper, jobs=args.jobs,
    )
    Path(args.report).write_text(emit_report(report, "csv"), encoding="utf-8")
    outputs = [args.report]
    if args.json_report:
        Path(args.json_report).write_text(emit_report(report, "json"), encoding="utf-8")
        outputs.append(args.json_report)
    print(emit_report(report, "table"), end="")
    config = {
        "layers": layers,
        "upper": report.upper,
        "variant": args.variant,
        "gate_mode": args.gate_mode,
        "jobs": args.jobs,
        "train": cfg.__dict__,
        "seed": cfg.seed,
    }
    _write_manifest(args, "sweep", config, inputs=[args.src, args.tgt],
                    outputs=outputs, started=started)
    return 0


def _cmd_ablate(args):
    started = time.monotonic()
    source = read_bank(args.src)
    target = read_bank(args.tgt)
    upper = args.upper if args.upper is not None else source.n_layers
    lines = ["variant,seed,source_accuracy,source_f1,target_accuracy,target_f1"]
    means = {}
    for variant in VARIANTS:
        scores = []
        for seed in args.seeds:
            cfg = _train_config(args)
            cfg.seed = seed
            system = build_fusion_system(
                LayerPair(args.lower, upper), source.shape[2],
                variant=variant, mode=args.gate_mode, seed=seed,
            )
            head = init_head(source.shape[2], source.num_classes, seed=seed)
            train(system, head, source, cfg)
            on_source = evaluate(system, head, source, "test")
            on_target = evaluate(system, head, target, "test")
            scores.append(on_target.accuracy)
            lines.append(
                f"{variant},{seed},{on_source.accuracy!r},{on_source.micro_f1!r},"
                f"{on_target.accuracy!r},{on_target.micro_f1!r}"
            )
        means[variant] = sum(scores) / len(scores)
    for variant in VARIANTS:
        lines.append(f"{variant},mean,,,{means[variant]!r},")
    text = "\n".join(lines) + "\n"
    Path(args.report).write_text(text, encoding="utf-8")
    for variant in VARIANTS:
        print(f"{variant}: mean target accuracy {means[variant]:.4f}")
    config = {
        "lower": args.lower,
        "upper": upper,
        "gate_mode": args.gate_mode,
        "seeds": list(args.seeds),
        "train": _train_config(args).__dict__,
    }
    _write_manifest(args, "ablate", config, inputs=[args.src, args.tgt],
                    outputs=[args.report], started=started)
    return 0


def _cmd_cossim(args):
    started = time.monotonic()
    source = read_bank(args.src)
    targets = [read_bank(path) for path in args.tgt]
    inputs = [args.src, *args.tgt]
    if args.params:
        system, _ = load_params(args.params)
        inputs.append(args.params)
    elif args.baseline:
        system = BaselineSystem(upper=source.n_layers)
    else:
        system = build_fusion_system(
            LayerPair(args.lower, source.n_layers), source.shape[2],
            variant=args.variant, mode=args.gate_mode, seed=args.seed,
        )
    report = avg_cross_lingual_similarity(
        system, source, targets, pairs=args.pairs, split=args.split
    )
    text = emit_report(report, args.format)
    outputs = []
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        outputs.append(args.out)
    else:
        print(text, end="")
    config = {
        "system": system.config_id(),
        "pairs": args.pairs,
        "split": args.split,
        "format": args.format,
        "seed": args.seed,
    }
    _write_manifest(args, "cossim", config, inputs=inputs, outputs=outputs, started=started)
    return 0


def _cmd_gradcheck(args):
    started = time.monotonic()
    shape = (args.batch, args.tokens, args.channels)
    cases = [("full", "sigmoid"), ("full", "literal"), ("global", "sigmoid"), ("local", "sigmoid")]
    failures = 0
    for variant, mode in cases:
        loss_fn, params = classification_pipeline(
            args.seed, shape=shape, classes=args.classes, variant=variant, mode=mode
        )
        report = finite_difference_check(loss_fn, params, step=args.eps, rtol=args.rtol)
        status = "ok" if report.passed else "FAIL"
        print(f"pipeline variant={variant} mode={mode}: max error "
              f"{report.max_error:.3e} [{status}]")
        if not report.passed:
            failures += 1
            print(report.format_table())
    config = {
        "seed": args.seed,
        "eps": args.eps,
        "rtol": args.rtol,
        "shape": list(shape),
        "classes": args.classes,
    }
    _write_manifest(args, "gradcheck", config, inputs=[], outputs=[], started=started)
    if failures:
        print(f"gradcheck: {failures} of {len(cases)} checks failed")
        return 1
    print(f"gradcheck: all {len(cases)} checks passed (rtol {args.rtol:g})")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="layerfuse",
        description="Attention-gated fusion of encoder layers plus the desk-scale "
                    "cross-language experiment harness.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    def _common(sub):
        sub.add_argument("--manifest", default=None, help="override the run-manifest path")

    sub = commands.add_parser("gen-task", help="generate parallel synthetic banks")
    sub.add_argument("--spec", default=None, help="task spec JSON file (defaults built in)")
    sub.add_argument("--seed", type=int, default=None, help="override the spec seed")
    sub.add_argument("--out-src", required=True)
    sub.add_argument("--out-tgt", required=True)
    _common(sub)
    sub.set_defaults(func=_cmd_gen_task)

    sub = commands.add_parser("inspect-bank", help="validate and summarize a bank file")
    sub.add_argument("--bank", required=True)
    _common(sub)
    sub.set_defaults(func=_cmd_inspect_bank)

    sub = commands.add_parser("fuse", help="write fused features for a whole bank")
    sub.add_argument("--bank", required=True)
    sub.add_argument("--params", required=True, help="parameter file from 'train'")
    sub.add_argument("--out", required=True)
    _common(sub)
    sub.set_defaults(func=_cmd_fuse)

    sub = commands.add_parser("train", help="train one system on a source bank")
    sub.add_argument("--src", required=True)
    sub.add_argument("--tgt", default=None, help="optional target bank for transfer metrics")
    which = sub.add_mutually_exclusive_group(required=True)
    which.add_argument("--lower", type=int, help="lower layer index to fuse with the top layer")
    which.add_argument("--baseline", action="store_true", help="top layer only, no fusion")
    sub.add_argument("--upper", type=int, default=None, help="upper layer (default: last)")
    sub.add_argument("--variant", choices=VARIANTS, default="full")
    sub.add_argument("--gate-mode", choices=GATE_MODES, default="sigmoid")
    sub.add_argument("--out", required=True, help="where to write the parameter file")
    _add_train_flags(sub)
    _common(sub)
    sub.set_defaults(func=_cmd_train)

    sub = commands.add_parser("sweep", help="baseline plus one row per fused lower layer")
    sub.add_argument("--src", required=True)
    sub.add_argument("--tgt", required=True)
    sub.add_argument("--layers", type=_parse_int_list, default=None,
                     help="lower layers to sweep, e.g. '1..12' (default: all)")
    sub.add_argument("--upper", type=int, default=None)
    sub.add_argument("--variant", choices=VARIANTS, default="full")
    sub.add_argument("--gate-mode", choices=GATE_MODES, default="sigmoid")
    sub.add_argument("--report", required=True, help="CSV report path")
    sub.add_argument("--json-report", default=None, help="also write a JSON report here")
    sub.add_argument("--jobs", type=int, default=1, help="parallel rows (same output for any N)")
    _add_train_flags(sub)
    _common(sub)
    sub.set_defaults(func=_cmd_sweep)

    sub = commands.add_parser("ablate", help="compare full/global/local gate variants")
    sub.add_argument("--src", required=True)
    sub.add_argument("--tgt", required=True)
    sub.add_argument("--lower", type=int, required=True)
    sub.add_argument("--upper", type=int, default=None)
    sub.add_argument("--gate-mode", choices=GATE_MODES, default="sigmoid")
    sub.add_argument("--seeds", type=_parse_int_list, default=[0],
                     help="seeds to average over, e.g. '0..9'")
    sub.add_argument("--report", required=True)
    _add_train_flags(sub)
    _common(sub)
    sub.set_defaults(func=_cmd_ablate)

    sub = commands.add_parser("cossim", help="cross-language cosine-similarity probe")
    sub.add_argument("--src", required=True)
    sub.add_argument("--tgt", action="append", required=True,
                     help="target bank; repeat for several languages")
    which = sub.add_mutually_exclusive_group(required=True)
    which.add_argument("--params", help="use a trained system from this parameter file")
    which.add_argument("--baseline", action="store_true")
    which.add_argument("--lower", type=int, help="fresh system fusing this lower layer")
    sub.add_argument("--variant", choices=VARIANTS, default="full")
    sub.add_argument("--gate-mode", choices=GATE_MODES, default="sigmoid")
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--pairs", type=int, default=20, help="parallel sentence pairs per language")
    sub.add_argument("--split", default="test")
    sub.add_argument("--format", choices=("csv", "json", "table"), default="table")
    sub.add_argument("--out", default=None, help="write the report here instead of stdout")
    _common(sub)
    sub.set_defaults(func=_cmd_cossim)

    sub = commands.add_parser("gradcheck", help="verify gradients against finite differences")
    sub.add_argument("--seed", type=int, default=17)
    sub.add_argument("--eps", type=float, default=1e-5, help="finite-difference step")
    sub.add_argument("--rtol", type=float, default=1e-4)
    sub.add_argument("--batch", type=int, default=4)
    sub.add_argument("--tokens", type=int, default=8)
    sub.add_argument("--channels", type=int, default=32)
    sub.add_argument("--classes", type=int, default=3)
    _common(sub)
    sub.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.raw_argv = argv
    try:
        return args.func(args)
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
