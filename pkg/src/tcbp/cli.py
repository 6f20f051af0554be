"""Command-line interface: synth, train, order, eval, gradcheck, bench.

Conventions: logs go to stderr, data to stdout or --out files; exit code 0 on
success, 1 on a failed check or data error, 2 on usage errors. Every
subcommand accepts --config FILE holding flat ``key = value`` lines; explicit
flags win over the file, which wins over built-in defaults. Each run prints
its fully-resolved configuration to stderr.
"""

import argparse
import csv
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from .dataio import (
    FormatError,
    SPLITS,
    SynthConfig,
    generate_synthetic,
    load_manifest,
)
from .encoder import EncoderModel, METHODS, SAMPLINGS
from .gradcheck import SUITES, TOLERANCE, run_gradchecks
from .ordering import chance_accuracy
from .sketching import MODE_CBP, MODE_TCBP, init_sketch_params
from .training import TrainConfig, evaluate, order_scenes, train

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


def _log(msg: str = ""):
    print(msg, file=sys.stderr)


def _parse_mapping(text: str, key_type, value_type, what: str) -> dict:
    """Parse 'k:v,k:v' flags such as --sizes 2:0.6,3:0.4."""
    out = {}
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            key, value = item.split(":")
            out[key_type(key)] = value_type(value)
        except ValueError as exc:
            raise UsageError(f"cannot parse {what} entry {item!r}: {exc}") from exc
    if not out:
        raise UsageError(f"{what} is empty")
    return out


def _parse_int_list(text: str, what: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"cannot parse {what}: {exc}") from exc


def _print_resolved(cmd: str, args: argparse.Namespace, skip=("func", "command")):
    _log(f"[{cmd}] resolved configuration:")
    for key in sorted(vars(args)):
        if key in skip:
            continue
        _log(f"  {key} = {getattr(args, key)}")


def _format_table(headers, rows) -> str:
    cells = [[str(h) for h in headers]] + [[str(v) for v in row] for row in rows]
    widths = [max(len(line[k]) for line in cells) for k in range(len(headers))]
    lines = []
    for idx, line in enumerate(cells):
        lines.append("  ".join(v.rjust(w) for v, w in zip(line, widths)))
        if idx == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _emit_table(headers, rows, out_dir, name: str):
    """Pretty table on stdout plus CSV/JSON copies when an output dir is given."""
    print(_format_table(headers, rows))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / f"{name}.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(headers)
            writer.writerows(rows)
        records = [dict(zip(headers, row)) for row in rows]
        (out_dir / f"{name}.json").write_text(json.dumps(records, indent=2) + "\n",
                                              encoding="utf-8")


# ---------------------------------------------------------------------------
# Config-file overlay.

def _load_config_file(path) -> dict:
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _coerce_config(sub: argparse.ArgumentParser, values: dict) -> dict:
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "command")}
    out = {}
    for key, raw in values.items():
        if key == "config":
            continue
        if key not in actions:
            raise UsageError(f"unknown config key {key!r}")
        action = actions[key]
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            lowered = raw.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"config key {key!r} expects a boolean, got {raw!r}")
            out[key] = lowered in ("true", "1", "yes")
        elif action.type is not None:
            try:
                out[key] = action.type(raw)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"config key {key!r}: {exc}") from exc
        else:
            out[key] = raw
    return out


# ---------------------------------------------------------------------------
# Subcommands.

def cmd_synth(args) -> int:
    if args.out is None:
        raise UsageError("--out directory is required")
    cfg = SynthConfig(
        n_train=args.n_scenes, n_val=args.n_val, n_test=args.n_test,
        size_weights=_parse_mapping(args.sizes, int, float, "--sizes"),
        channels=_parse_mapping(args.channels, str, int, "--channels"),
        t_weights=_parse_mapping(args.t_dist, int, float, "--t-dist"),
        signal_strength=args.signal, noise_std=args.noise, seed=args.seed,
    )
    manifest = generate_synthetic(cfg, args.out)
    dataset = load_manifest(manifest)
    _log(f"[synth] wrote {manifest}")
    sizes = list(range(2, 7))
    rows = []
    for split in SPLITS:
        hist = dataset.size_histogram(split)
        if not hist and split != "train":
            continue
        rows.append([split] + [hist.get(m, 0) for m in sizes] + [sum(hist.values())])
    _emit_table(["split"] + [str(m) for m in sizes] + ["total"], rows,
                args.out, "summary")
    return EXIT_OK


def _build_model_from_flags(args, dataset) -> EncoderModel:
    missing = [tag for tag in args.modalities if tag not in dataset.channels]
    if missing:
        raise UsageError(f"dataset lacks modality {missing[0]!r} "
                         f"(available: {sorted(dataset.channels)})")
    channels = {tag: dataset.channels[tag] for tag in args.modalities}
    hidden = args.hidden_dim if args.hidden_dim > 0 else None
    phi = args.phi_dim if args.phi_dim > 0 else None
    return EncoderModel(channels, method=args.method, t=args.t, d=args.d,
                        reduce_dim=args.reduce_dim, hidden_dim=hidden, phi_dim=phi,
                        sampling=args.sampling, seed=args.seed)


def _require_manifest(args):
    if args.manifest is None:
        raise UsageError("--manifest is required")
    if not Path(args.manifest).is_file():
        raise UsageError(f"manifest not found: {args.manifest}")
    return load_manifest(args.manifest)


def cmd_train(args) -> int:
    dataset = _require_manifest(args)
    model = _build_model_from_flags(args, dataset)
    config = TrainConfig(lr=args.lr, momentum=args.momentum,
                         weight_decay=args.weight_decay, batch_size=args.batch_size,
                         iterations=args.iters, alpha=args.alpha,
                         use_negatives=args.negatives, seed=args.seed,
                         sampling=args.sampling, t=args.t)
    out_dir = Path(args.out) if args.out else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_fh = open(out_dir / "train_log.jsonl", "w", encoding="utf-8") if out_dir else None
    has_val = bool(dataset.scenes("val"))

    def on_iteration(iteration, loss, model_):
        record = {"iteration": iteration, "loss": loss}
        if args.eval_every and has_val and iteration % args.eval_every == 0:
            record["val_accuracy"] = evaluate(model_, dataset, "val",
                                              threads=args.threads).accuracy
            _log(f"[train] iter {iteration}: loss {loss:.6f} "
                 f"val_accuracy {record['val_accuracy']:.4f}")
        elif iteration % max(1, args.log_every) == 0:
            _log(f"[train] iter {iteration}: loss {loss:.6f}")
        if log_fh:
            log_fh.write(json.dumps(record) + "\n")
            log_fh.flush()
        if out_dir and args.checkpoint_every and iteration % args.checkpoint_every == 0:
            model_.save(out_dir / f"model_iter{iteration:06d}.tcbp")

    try:
        train(model, dataset, config, on_iteration=on_iteration)
    finally:
        if log_fh:
            log_fh.close()
    if out_dir:
        model.save(out_dir / "model_final.tcbp")
        _log(f"[train] saved {out_dir / 'model_final.tcbp'}")
    if has_val:
        report = evaluate(model, dataset, "val", threads=args.threads)
        _log(f"[train] final val accuracy {100 * report.accuracy:.2f}% "
             f"(chance {100 * report.chance:.2f}%)")
    return EXIT_OK


def _require_model(args) -> EncoderModel:
    if args.model is None:
        raise UsageError("--model checkpoint is required")
    if not Path(args.model).is_file():
        raise UsageError(f"model checkpoint not found: {args.model}")
    return EncoderModel.load(args.model)


def cmd_order(args) -> int:
    dataset = _require_manifest(args)
    model = _require_model(args)
    scenes = dataset.scenes(args.split)
    if not scenes:
        raise UsageError(f"no scenes in split {args.split!r}")
    results = order_scenes(model, scenes, dataset.clips, rng_seed=args.seed,
                           threads=args.threads)
    sink = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for scene, result in results:
            record = {
                "scene_id": scene.scene_id,
                "predicted": [scene.clip_ids[k] for k in result.permutation],
                "gt": list(scene.clip_ids),
                "total_loss": result.total_loss,
                "correct": result.correct,
            }
            sink.write(json.dumps(record) + "\n")
    finally:
        if args.out:
            sink.close()
    n_correct = sum(1 for _, r in results if r.correct)
    _log(f"[order] {n_correct}/{len(results)} scenes fully correct")
    return EXIT_OK


def cmd_eval(args) -> int:
    dataset = _require_manifest(args)
    model = _require_model(args)
    report = evaluate(model, dataset, args.split, rng_seed=args.seed,
                      threads=args.threads)
    sizes = sorted(report.per_size)
    headers = ["row"] + [str(m) for m in sizes] + ["2-6"]
    rows = [
        ["samples"] + [report.per_size[m]["n"] for m in sizes] + [report.n_scenes],
        ["random"] + [f"{100 / math.factorial(m):.2f}" for m in sizes]
        + [f"{100 * report.chance:.2f}"],
        ["model"] + [f"{100 * report.per_size[m]['accuracy']:.2f}" for m in sizes]
        + [f"{100 * report.accuracy:.2f}"],
    ]
    _emit_table(headers, rows, args.out, "eval")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ops = args.op.split(",") if args.op else None
    try:
        results = run_gradchecks(ops=ops, instances=args.instances, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    failed = []
    rows = []
    for name, err in results.items():
        status = "PASS" if err < TOLERANCE else "FAIL"
        if status == "FAIL":
            failed.append(name)
        rows.append([name, f"{err:.3e}", status])
    print(_format_table(["op", "max_rel_err", "status"], rows))
    if failed:
        _log(f"[gradcheck] FAILED: {', '.join(failed)} (tolerance {TOLERANCE:g})")
        return EXIT_CHECK_FAILED
    _log(f"[gradcheck] all {len(results)} checks passed (tolerance {TOLERANCE:g})")
    return EXIT_OK


def _time_op(fn, repeats: int) -> float:
    fn()  # warm-up
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def cmd_bench(args) -> int:
    from .sketching import (
        circular_convolve_kernel,
        count_sketch_kernel,
        temporal_sketch_kernel,
    )
    c_values = _parse_int_list(args.c_values, "--c-values")
    t_values = _parse_int_list(args.t_values, "--t-values")
    d_values = _parse_int_list(args.d_values, "--d-values")
    rng = np.random.Generator(np.random.Philox(args.seed))
    rows = []
    for c in c_values:
        for t in t_values:
            for d in d_values:
                x = rng.normal(size=(c, t))
                for method in ("cbp", "tcbp", "meanpool"):
                    if method == "cbp":
                        p = init_sketch_params(c, 1, d, args.seed, MODE_CBP)
                        n_params = p.param_count()
                        expected = 2 * 2 * c
                        cols = np.ascontiguousarray(x.T)
                        s1 = p.s1.astype(np.float64)
                        proj = lambda: count_sketch_kernel(cols, p.h1, s1, d)
                        u = proj()
                        conv = lambda: circular_convolve_kernel(u, u).sum(axis=0)
                    elif method == "tcbp":
                        p = init_sketch_params(c, t, d, args.seed, MODE_TCBP)
                        n_params = p.param_count()
                        expected = 2 * (c + c * t)
                        s1 = p.s1.astype(np.float64)
                        proj = lambda: temporal_sketch_kernel(x, p.h1, s1, d)
                        u = proj()
                        conv = lambda: circular_convolve_kernel(u, u)
                    else:
                        n_params = expected = 0
                        proj = lambda: x.mean(axis=1)
                        conv = lambda: None
                    if n_params != expected:
                        _log(f"[bench] parameter accounting FAILED for {method} "
                             f"c={c} t={t}: stored {n_params}, formula {expected}")
                        return EXIT_CHECK_FAILED
                    proj_ms = _time_op(proj, args.repeats)
                    conv_ms = _time_op(conv, args.repeats)
                    rows.append([method, c, t, d, n_params,
                                 f"{proj_ms:.4f}", f"{conv_ms:.4f}"])
    headers = ["method", "c", "t", "d", "params", "proj_ms", "conv_ms"]
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(headers)
            writer.writerows(rows)
        _log(f"[bench] wrote {args.out}")
    else:
        writer = csv.writer(sys.stdout)
        writer.writerow(headers)
        writer.writerows(rows)
    _log("[bench] parameter accounting matches 2*2c (cbp) and 2*(c+ct) (tcbp)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser assembly.

def _add_common(sub):
    sub.add_argument("--config", default=None,
                     help="flat key=value file; flags override file values")
    sub.add_argument("--seed", type=int, default=0, help="RNG seed")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="tcbp",
        description="Temporal compact bilinear pooling: synthetic data, training, "
                    "ordering inference, gradient checks, benchmarks.",
    )
    subs = parser.add_subparsers(dest="command", metavar="command")
    by_name = {}

    synth = subs.add_parser("synth", help="generate a synthetic orderable dataset")
    _add_common(synth)
    synth.add_argument("--out", default=None, help="output dataset directory")
    synth.add_argument("--n-scenes", type=int, default=100, help="training scenes")
    synth.add_argument("--n-val", type=int, default=0, help="validation scenes")
    synth.add_argument("--n-test", type=int, default=0, help="test scenes")
    synth.add_argument("--sizes", default="2:958,3:472,4:203,5:100,6:51",
                       help="scene-size weights, e.g. 2:0.6,3:0.4")
    synth.add_argument("--channels", default="A:24,P:48,I:48",
                       help="per-modality channel counts, e.g. A:24,P:48")
    synth.add_argument("--t-dist", default="4:0.65,5:0.175,6:0.175",
                       help="segment-count weights per clip")
    synth.add_argument("--signal", type=float, default=1.0,
                       help="latent time-code strength (0 = pure noise)")
    synth.add_argument("--noise", type=float, default=0.1, help="noise stddev")
    synth.set_defaults(func=cmd_synth)
    by_name["synth"] = synth

    train_p = subs.add_parser("train", help="train an ordering model")
    _add_common(train_p)
    train_p.add_argument("--manifest", default=None, help="dataset manifest path")
    train_p.add_argument("--modalities", default="PI", help="modality tags, e.g. API")
    train_p.add_argument("--method", choices=METHODS, default="tcbp")
    train_p.add_argument("--t", type=int, default=3, help="segments per clip")
    train_p.add_argument("--sampling", choices=SAMPLINGS, default="c_last")
    train_p.add_argument("--d", type=int, default=8192, help="sketch output dimension")
    train_p.add_argument("--reduce-dim", type=int, default=2048,
                         help="1x1 channel-reduction width (multi-modality only)")
    train_p.add_argument("--hidden-dim", type=int, default=0, help="0 = method default")
    train_p.add_argument("--phi-dim", type=int, default=0, help="0 = method default")
    train_p.add_argument("--negatives", action="store_true", default=False,
                         help="add margin hinges on corrupted pairs (1:1 ratio)")
    train_p.add_argument("--alpha", type=float, default=0.2, help="negative margin")
    train_p.add_argument("--lr", type=float, default=1e-3)
    train_p.add_argument("--momentum", type=float, default=0.9)
    train_p.add_argument("--weight-decay", type=float, default=5e-4)
    train_p.add_argument("--batch-size", type=int, default=32)
    train_p.add_argument("--iters", type=int, default=5000)
    train_p.add_argument("--out", default=None, help="output directory for "
                         "checkpoints and the training log")
    train_p.add_argument("--log-every", type=int, default=50)
    train_p.add_argument("--eval-every", type=int, default=0,
                         help="validate every N iterations (0 = off)")
    train_p.add_argument("--checkpoint-every", type=int, default=0,
                         help="checkpoint every N iterations (0 = off)")
    train_p.add_argument("--threads", type=int, default=1)
    train_p.set_defaults(func=cmd_train)
    by_name["train"] = train_p

    order_p = subs.add_parser("order", help="emit per-scene predicted orderings")
    _add_common(order_p)
    order_p.add_argument("--manifest", default=None)
    order_p.add_argument("--model", default=None, help="model checkpoint")
    order_p.add_argument("--split", choices=SPLITS, default="test")
    order_p.add_argument("--out", default=None, help="JSONL output file (default stdout)")
    order_p.add_argument("--threads", type=int, default=1)
    order_p.set_defaults(func=cmd_order)
    by_name["order"] = order_p

    eval_p = subs.add_parser("eval", help="ordering accuracy with per-size breakdown")
    _add_common(eval_p)
    eval_p.add_argument("--manifest", default=None)
    eval_p.add_argument("--model", default=None)
    eval_p.add_argument("--split", choices=SPLITS, default="val")
    eval_p.add_argument("--out", default=None, help="directory for eval.csv/eval.json")
    eval_p.add_argument("--threads", type=int, default=1)
    eval_p.set_defaults(func=cmd_eval)
    by_name["eval"] = eval_p

    grad_p = subs.add_parser("gradcheck", help="finite-difference checks of backward rules")
    _add_common(grad_p)
    grad_p.add_argument("--op", default=None,
                        help=f"comma-separated subset of: {', '.join(sorted(SUITES))}")
    grad_p.add_argument("--instances", type=int, default=10)
    grad_p.set_defaults(func=cmd_gradcheck)
    by_name["gradcheck"] = grad_p

    bench_p = subs.add_parser("bench", help="time the encoders and check Table-style "
                              "parameter accounting")
    _add_common(bench_p)
    bench_p.add_argument("--c-values", default="256,1024")
    bench_p.add_argument("--t-values", default="1,3")
    bench_p.add_argument("--d-values", default="512,8192")
    bench_p.add_argument("--repeats", type=int, default=3)
    bench_p.add_argument("--out", default=None, help="CSV output file (default stdout)")
    bench_p.set_defaults(func=cmd_bench)
    by_name["bench"] = bench_p

    return parser, by_name


def main(argv=None) -> int:
    parser, by_name = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        if args.config:
            overrides = _coerce_config(by_name[args.command],
                                       _load_config_file(args.config))
            by_name[args.command].set_defaults(**overrides)
            args = parser.parse_args(argv)
        _print_resolved(args.command, args)
        return args.func(args)
    except UsageError as exc:
        _log(f"error: {exc}")
        by_name[args.command].print_usage(sys.stderr)
        return EXIT_USAGE
    except (FormatError, ValueError, RuntimeError) as exc:
        _log(f"error: {exc}")
        return EXIT_CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())
