"""``dvstn`` command line.

Exit status: 0 success, 1 usage, 2 data/format problems, 3 runtime failure.
``--model`` takes a spec path or a ladder id (M1..M8); ids are looked up in
``$DVSTN_MODEL_DIR`` first and fall back to the packaged specs.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .errors import DvstnError, TrainingDiverged

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
MODEL_DIR_ENV = "DVSTN_MODEL_DIR"

log = logging.getLogger("dvstn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def resolve_model(ref):
    from .graph import load_spec
    from .zoo import MODEL_IDS, load_canonical

    path = Path(ref)
    if path.exists():
        return load_spec(path)
    mid = ref.upper()
    if mid in MODEL_IDS:
        env = os.environ.get(MODEL_DIR_ENV)
        if env and (Path(env) / f"{mid}.json").exists():
            return load_spec(Path(env) / f"{mid}.json")
        return load_canonical(mid)
    raise FileNotFoundError(2, "no such model file or ladder id", ref)


def _weights(path, spec):
    from .formats import load_weights

    return load_weights(path, spec) if path else None


def _megas(n):
    return f"{n / 1e6:.2f}M"


# --- subcommands -----------------------------------------------------------------

def cmd_count(args, out):
    from .graph import count_macs, count_params, layer_counts

    spec = resolve_model(args.model)
    shape = None
    if args.input_side:
        shape = (spec.input_shape[0], args.input_side, args.input_side)
    if args.per_layer:
        for lid, kind, p, m in layer_counts(spec, shape):
            if p or m:
                print(f"{lid}\t{kind}\t{p}\t{m}", file=out)
    params, macs = count_params(spec), count_macs(spec, shape)
    print(f"model\t{spec.name}", file=out)
    print(f"params\t{params}\t{_megas(params)}", file=out)
    print(f"macs\t{macs}\t{_megas(macs)}", file=out)


def cmd_transform(args, out):
    from .compression import apply_passes
    from .formats import save_weights
    from .graph import save_spec

    spec = resolve_model(args.model)
    weights = _weights(args.weights, spec)
    new, new_weights = apply_passes(spec, args.passes or "", weights)
    save_spec(new, args.out)
    print(f"wrote {args.out}", file=out)
    if args.out_weights:
        if new_weights is None:
            raise DvstnError("the passes changed the architecture; weights need retraining")
        save_weights(new_weights, args.out_weights)
        print(f"wrote {args.out_weights}", file=out)


def cmd_fold(args, out):
    from .compression import fold_batchnorm
    from .formats import save_weights
    from .graph import save_spec

    spec = resolve_model(args.model)
    weights = _weights(args.weights, spec)
    folded, folded_weights = fold_batchnorm(spec, weights)
    save_spec(folded, args.out_model)
    print(f"wrote {args.out_model}", file=out)
    if args.out_weights:
        if folded_weights is None:
            raise UsageError("--out-weights needs --weights")
        save_weights(folded_weights, args.out_weights)
        print(f"wrote {args.out_weights}", file=out)


def cmd_simulate(args, out):
    from .synth import generate_preset

    train, test = generate_preset(args.out, args.preset, args.seed, args.noise, args.jitter)
    print(f"train\t{len(train)}\t{train.path}", file=out)
    print(f"test\t{len(test)}\t{test.path}", file=out)


def cmd_train(args, out):
    from .formats import save_weights
    from .trainer import HyperParams, train

    spec = resolve_model(args.model)
    hp = HyperParams(lr=args.lr, momentum=args.momentum, batch_size=args.batch, epochs=args.epochs,
                     seed=args.seed, loss_mode=args.loss_mode)
    log_file = open(args.log, "w") if args.log else None

    def on_epoch(rec):
        print(rec.to_record(), file=out, flush=True)
        if log_file:
            print(rec.to_record(), file=log_file, flush=True)

    try:
        weights, _ = train(spec, args.data, hp, eval_manifest=args.eval_data, on_epoch=on_epoch)
    finally:
        if log_file:
            log_file.close()
    save_weights(weights, args.out)
    print(f"wrote {args.out}", file=out)


def cmd_eval(args, out):
    from .trainer import evaluate

    spec = resolve_model(args.model)
    m = evaluate(spec, _weights(args.weights, spec), args.data, args.threshold)
    print(f"precision\t{m.precision:.4f}", file=out)
    print(f"recall\t{m.recall:.4f}", file=out)
    print(f"f1\t{m.f1:.4f}", file=out)
    print(f"confusion\ttp={m.tp}\tfp={m.fp}\ttn={m.tn}\tfn={m.fn}", file=out)


def cmd_stream(args, out):
    from .formats import iter_frames
    from .pipeline import StreamStats, TcpSink, stream_detector

    spec = resolve_model(args.model)
    weights = _weights(args.weights, spec)
    source = iter_frames(sys.stdin.buffer if args.input == "-" else args.input)
    sink = TcpSink.from_string(args.sink) if args.sink else None
    stats = StreamStats()
    try:
        for rec in stream_detector(source, spec, weights, stride=args.stride, threshold=args.threshold,
                                   refractory_us=int(args.refractory_ms * 1000), threaded=args.realtime,
                                   stats=stats):
            line = rec.to_record()
            print(line, file=out, flush=True)
            if sink is not None:
                sink.send(line)
    finally:
        if sink is not None:
            sink.close()
    log.info("frames=%d detections=%d alerts=%d dropped=%d", stats.frames, stats.detections, stats.alerts,
             stats.dropped)


def cmd_bench(args, out):
    from .bench import bench_models

    if args.weights and len(args.model) > 1:
        raise UsageError("--weights applies to a single --model")
    models = []
    for ref in args.model:
        spec = resolve_model(ref)
        models.append((spec.name, spec, _weights(args.weights, spec)))
    threads = None if args.threads == 0 else args.threads
    reports = bench_models(models, args.warmup, args.iters, stride=args.stride, seed=args.seed, threads=threads)
    for report in reports:
        print(report.text(), file=out)
    for report in reports:
        print(report.summary_line(), file=out)


def build_parser():
    p = _Parser(prog="dvstn", description="Tiny fall-detection CNN toolkit for DVS event frames.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("count", help="print parameter and MAC counts")
    s.add_argument("--model", required=True)
    s.add_argument("--input-side", type=int)
    s.add_argument("--per-layer", action="store_true")
    s.set_defaults(func=cmd_count)

    s = sub.add_parser("transform", help="apply compression passes")
    s.add_argument("--model", required=True)
    s.add_argument("--passes", default="", help="e.g. separable:conv1_7x7_s2,scale:0.75,input:32,fold")
    s.add_argument("--out", required=True)
    s.add_argument("--weights")
    s.add_argument("--out-weights")
    s.set_defaults(func=cmd_transform)

    s = sub.add_parser("fold", help="fold batchnorm into the preceding layers")
    s.add_argument("--model", required=True)
    s.add_argument("--weights")
    s.add_argument("--out-model", required=True)
    s.add_argument("--out-weights")
    s.set_defaults(func=cmd_fold)

    s = sub.add_parser("simulate", help="render a synthetic dataset")
    s.add_argument("--preset", default="desk", choices=("desk", "tiny"))
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.002)
    s.add_argument("--jitter", action="store_true")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", help="train with SGD + momentum")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--eval-data")
    s.add_argument("--lr", type=float, default=0.01)
    s.add_argument("--momentum", type=float, default=0.9)
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--batch", type=int, default=16, help="segments per batch, or clips in consensus mode")
    s.add_argument("--loss-mode", choices=("segment", "consensus"), default="segment")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--log")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="precision / recall / F1 on a manifest")
    s.add_argument("--model", required=True)
    s.add_argument("--weights", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("stream", help="sliding-window detection over a DVSF file or stdin")
    s.add_argument("--model", required=True)
    s.add_argument("--weights", required=True)
    s.add_argument("--input", required=True, help="DVSF file, or - for stdin")
    s.add_argument("--stride", type=int, default=1)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--sink", help="host:port for newline-delimited TCP records")
    s.add_argument("--refractory-ms", type=float, default=2000.0)
    s.add_argument("--realtime", action="store_true", help="drop-oldest producer thread, as for a live sensor")
    s.set_defaults(func=cmd_stream)

    s = sub.add_parser("bench", help="per-window latency")
    s.add_argument("--model", required=True, nargs="+", help="several models are timed round-robin")
    s.add_argument("--weights")
    s.add_argument("--warmup", type=int, default=20)
    s.add_argument("--iters", type=int, default=200)
    s.add_argument("--stride", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--threads", type=int, default=1, help="BLAS threads; 0 leaves the pool alone")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None, out=None):
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args, out)
    except UsageError as exc:
        print(f"dvstn {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"dvstn {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        where = exc.filename or ""
        print(f"dvstn {args.command}: {where}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_DATA
    except (DvstnError, ValueError) as exc:
        print(f"dvstn {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:
        print(f"dvstn {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
