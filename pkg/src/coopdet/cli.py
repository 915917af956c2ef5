"""Command-line entry point: gen, forward, gradcheck, train, eval, bench.

Failures print one JSON object on stderr, ``{"error": <kind>, "message": ...}``,
and exit nonzero (2 for usage errors, 1 otherwise).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

import numpy as np

from .errors import CoopDetError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _read_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _write_text(path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def cmd_gen(args) -> dict:
    from .simulator import SceneConfig, gen_dataset, write_dataset

    doc = _read_json(args.config) if args.config else {}
    scene = dict(doc.get("scene", {}))
    n = args.n if args.n is not None else int(scene.pop("n_scenes", 16))
    scene.pop("n_scenes", None)
    cfg = dataclasses.replace(SceneConfig.from_dict(scene), seed=args.seed)
    scenes = gen_dataset(cfg, n)
    write_dataset(scenes, args.out)
    return {"scenes": len(scenes), "out": args.out}


def cmd_forward(args) -> dict:
    from .evaluation import dets_to_json
    from .runtime import detect_scenes, load_checkpoint
    from .simulator import read_dataset

    ckpt = load_checkpoint(args.model)
    scenes = read_dataset(args.data)
    dets = detect_scenes(ckpt.model, scenes)
    _write_text(args.out, dets_to_json([s.seed for s in scenes], dets))
    return {"scenes": len(scenes), "detections": sum(len(d) for d in dets), "out": args.out}


def cmd_gradcheck(args) -> dict:
    from .gradcheck import run_op_suite
    from .runtime.micro import end_to_end_gradcheck

    result = {}
    ok = True
    if not args.micro:
        ops = run_op_suite(args.seed)
        worst = max(r.max_rel_error for r in ops.values())
        result["ops"] = {k: r.max_rel_error for k, r in ops.items()}
        result["ops_max"] = worst
        ok &= worst < 1e-5
    e2e = end_to_end_gradcheck(args.seed)
    result["micro"] = e2e.by_param()
    result["micro_max"] = e2e.max_rel_error
    ok &= e2e.max_rel_error < 1e-4
    if not ok:
        raise CoopDetError(f"gradient check failed: {json.dumps({k: v for k, v in result.items() if k.endswith('_max')})}")
    return result


def cmd_train(args) -> dict:
    from .runtime import load_config, save_checkpoint, train_toy
    from .simulator import read_dataset

    model_cfg, train_cfg, eval_cfg = load_config(args.config)
    switches = {}
    if args.no_m1:
        switches["m1"] = False
    if args.no_m2:
        switches["m2"] = False
    if args.no_m3:
        switches["m3"] = False
    if args.fusion:
        switches["fusion"] = args.fusion
    if switches:
        model_cfg = model_cfg.replace(**switches)
    if args.epochs is not None:
        train_cfg = dataclasses.replace(train_cfg, epochs=args.epochs)
    scenes = read_dataset(args.data)
    val = read_dataset(args.val) if args.val else None
    result = train_toy(scenes, model_cfg, train_cfg, val_scenes=val, eval_cfg=eval_cfg)
    save_checkpoint(args.out, result.checkpoint)
    if args.history:
        _write_text(args.history, json.dumps(result.history, sort_keys=True, indent=2) + "\n")
    last = result.history[-1]["loss"] if result.history else None
    return {"epochs": train_cfg.epochs, "final_loss": last, "out": args.out}


def cmd_eval(args) -> dict:
    from .evaluation import EvalConfig, dets_from_json, evaluate
    from .runtime.config import eval_config_from_dict
    from .simulator import read_dataset

    eval_cfg = eval_config_from_dict(_read_json(args.config).get("eval", {})) if args.config else EvalConfig()
    if args.iou3d:
        eval_cfg = dataclasses.replace(eval_cfg, iou="3d")
    scenes = read_dataset(args.data)
    with open(args.dets, encoding="utf-8") as fh:
        seeds, dets = dets_from_json(fh.read())
    by_seed = dict(zip(seeds, dets))
    ordered = [by_seed.get(s.seed, []) for s in scenes]
    report = evaluate(ordered, [s.gt_in_ego_frame() for s in scenes], eval_cfg)
    _write_text(args.report, report.to_json() + "\n")
    return {"map": report.map, "report": args.report}


def cmd_bench(args) -> dict:
    from .runtime.bench import bench_attention, rows_to_csv

    try:
        sizes = [int(s) for s in args.sizes.split(",") if s]
    except ValueError as exc:
        raise UsageError(f"--sizes must be comma-separated integers: {args.sizes}") from exc
    if not sizes or min(sizes) < 1:
        raise UsageError("--sizes needs at least one positive size")
    rows = bench_attention(sizes, window=args.window, dim=args.dim, repeats=args.repeats)
    text = rows_to_csv(rows)
    if args.out:
        _write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return {"rows": len(rows), "out": args.out}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="coopdet", description="Class-adaptive cooperative detection toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic NDJSON dataset")
    g.add_argument("--config", help="JSON file with a 'scene' section")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, help="number of scenes (overrides scene.n_scenes)")
    g.set_defaults(func=cmd_gen)

    f = sub.add_parser("forward", help="run a checkpoint over a dataset")
    f.add_argument("--model", required=True, help="checkpoint file")
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_forward)

    c = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    c.add_argument("--micro", action="store_true", help="only the end-to-end micro-config check")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)

    t = sub.add_parser("train", help="train on a dataset and write a checkpoint")
    t.add_argument("--config", help="JSON with 'model' and 'train' sections (defaults if omitted)")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--val", help="optional validation dataset")
    t.add_argument("--history", help="write per-epoch history JSON here")
    t.add_argument("--epochs", type=int)
    t.add_argument("--no-m1", action="store_true")
    t.add_argument("--no-m2", action="store_true")
    t.add_argument("--no-m3", action="store_true")
    t.add_argument("--fusion", choices=("max", "avg", "single"))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score detections against a dataset")
    e.add_argument("--dets", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--config", help="JSON with an 'eval' section")
    e.add_argument("--iou3d", action="store_true")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="windowed versus global attention cost")
    b.add_argument("--sizes", default="16,32,64")
    b.add_argument("--window", type=int, default=4)
    b.add_argument("--dim", type=int, default=16)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--out", help="CSV path (stdout if omitted)")
    b.set_defaults(func=cmd_bench)
    return p


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": " ".join(str(message).split())}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("usage", str(exc), 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = args.func(args)
    except UsageError as exc:
        return _fail("usage", str(exc), 2)
    except CoopDetError as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    if args.command != "bench" or args.out:
        sys.stdout.write(json.dumps(summary, sort_keys=True, default=_jsonable) + "\n")
    return 0


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not serializable: {type(obj).__name__}")


if __name__ == "__main__":
    sys.exit(main())
