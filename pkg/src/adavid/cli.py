"""Command-line entry point: ``adavid <command> [options]``.

Settings come from flat ``key=value`` files (``--config``) and ``--set
key=value`` overrides, in that order on top of the built-in defaults. Keys
are ``section.field``; ``adavid <command> --help`` lists every key. All
working files live under ``--run DIR``::

    data/              gen: .clip stacks and dataset.json
    encoder.ckpt       train
    train_loss.csv     train
    cache/<hash>/      train-agg: one .cache record per long video and schedule
    agg-<pooling>.ckpt train-agg (pooling is transformer or mean)
    agg-<pooling>_loss.csv
    eval.json          eval
    sweep.csv          sweep

Exit codes: 0 success, 1 check failure, 2 usage error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("adavid")


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


# ------------------------------------------------------------------ settings
_EXTRA_KEYS = [
    # (key, type, default, help)
    ("agg_train.pooling", str, "transformer", "transformer | mean (average-pool baseline)"),
    ("agg_train.segments", int, 0, "segments per long video; 0 = data.long_segments"),
    ("agg_train.schedules", str, "d-full,d-dec,d-half,d-quarter",
     "encoder schedules whose features train the aggregator"),
    ("eval.schedules", str, "d-full,d-dec,d-half,d-quarter", "schedules to evaluate"),
    ("eval.frames", str, "", "comma list of frame counts; empty = natural length"),
    ("eval.benchmark", str, "mcq", "sweep benchmark: mcq | retrieval | frames"),
    ("eval.mcq_mode", str, "inter", "inter | intra"),
    ("eval.k", int, 5, "MCQ candidates per item"),
    ("eval.n_items", int, 500, "MCQ items"),
]


def _sections():
    from .aggregator import AggregatorConfig
    from .data import SyntheticDatasetSpec
    from .text import TextConfig
    from .train import TrainConfig
    from .video import EncoderConfig
    # (section, dataclass, fields that are derived rather than set)
    return [
        ("data", SyntheticDatasetSpec, {"seed"}),
        ("video", EncoderConfig, set()),
        ("text", TextConfig, {"vocab_size"}),
        ("train", TrainConfig, {"seed"}),
        ("agg", AggregatorConfig, {"embed_dim"}),
        ("agg_train", TrainConfig, {"seed", "strategy"}),
    ]


def key_table() -> dict:
    """``{key: (type, default, help)}`` for every accepted setting."""
    table = {}
    for section, cls, derived in _sections():
        for name, f in cls.__dataclass_fields__.items():
            if name not in derived:
                table[f"{section}.{name}"] = (type(f.default), f.default, "")
    for key, typ, default, text in _EXTRA_KEYS:
        table[key] = (typ, default, text)
    return table


def keys_help() -> str:
    lines = ["settings (section.field=default):"]
    for key, (typ, default, text) in key_table().items():
        lines.append(f"  {key}={default}" + (f"  [{text}]" if text else ""))
    lines.append("derived: text.vocab_size (dataset vocabulary), agg.embed_dim "
                 "(video.embed_dim); the seed always comes from --seed.")
    return "\n".join(lines)


def _convert(key, raw, typ):
    try:
        return typ(raw)
    except ValueError:
        raise UsageError(f"{key}: cannot read {raw!r} as {typ.__name__}") from None


def resolve_settings(config_path=None, overrides=()) -> dict:
    """Defaults, then the config file, then ``--set`` pairs. Unknown keys are errors."""
    from . import io
    table = key_table()
    raw = {}
    if config_path:
        raw.update(io.read_config(config_path))
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    unknown = sorted(set(raw) - set(table))
    if unknown:
        raise UsageError(f"unknown setting(s): {', '.join(unknown)}; "
                         "see --help for the accepted keys")
    out = {k: default for k, (_, default, _) in table.items()}
    for k, v in raw.items():
        out[k] = _convert(k, v, table[k][0])
    return out


def section(settings: dict, name: str) -> dict:
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in settings.items() if k.startswith(prefix)}


def build(cls, settings, name, **extra):
    fields = cls.__dataclass_fields__
    return cls(**{k: v for k, v in section(settings, name).items() if k in fields}, **extra)


def _hash(settings: dict) -> str:
    from . import io
    return io.config_hash(settings)


def _names(text: str) -> list:
    return [s.strip() for s in text.split(",") if s.strip()]


def _ints(text: str) -> list:
    try:
        return [int(s) for s in _names(text)]
    except ValueError:
        raise UsageError(f"expected a comma list of integers, got {text!r}") from None


# ------------------------------------------------------------------ commands
def _fmt_widths(widths) -> str:
    runs = []
    for w in widths:
        if runs and runs[-1][0] == w:
            runs[-1][1] += 1
        else:
            runs.append([w, 1])
    return ",".join(f"{w}x{n}" for w, n in runs)


def cmd_flops(args, settings) -> int:
    from . import io
    from .flops import TABLE1, schedule_flops, table1
    from .video import EncoderConfig, named_schedule
    for name in ("T", "N", "L", "S"):
        if getattr(args, name) < 1:
            raise UsageError(f"--{name} must be positive")
    if args.D < 4 or args.D % 4:
        raise UsageError("--D must be a positive multiple of 4")
    geometry = {"T": args.T, "N": args.N, "D": args.D, "L": args.L, "mode": args.mode,
                "S": args.S}
    if args.mode == "hier" and args.T % args.S:
        raise UsageError(f"--S {args.S} must divide --T {args.T}")
    full = schedule_flops((args.D,) * args.L, args.T, args.N, args.mode, args.S).total
    if args.table1:
        geometry = {"table1": True, "T": 4, "N": 196, "D": 768, "L": 12, "mode": "space-time"}
        rows = [(r["name"], r["widths"], r["flops"], r["ratio"], r["published_e10"],
                 r["rel_err"]) for r in table1()]
        assert len(rows) == len(TABLE1)
    else:
        if args.schedule:
            cfg = EncoderConfig(layers=args.L, width=args.D, head_dim=args.D // 4)
            widths = named_schedule(args.schedule, cfg).widths
            name = args.schedule
        else:
            widths, name = (args.D,) * args.L, f"d-{args.D}"
        total = schedule_flops(widths, args.T, args.N, args.mode, args.S).total
        rows = [(name, widths, total, total / full, None, None)]
    chash = _hash({**settings, **{f"flops.{k}": v for k, v in geometry.items()}})
    published = args.table1
    print(f"# config_hash={chash} seed={args.seed} "
          + " ".join(f"{k}={v}" for k, v in geometry.items()))
    header = f"{'name':<12} {'widths':<28} {'flops':>12} {'ratio':>6}"
    print(header + (f" {'published':>10} {'rel_err':>8}" if published else ""))
    for name, widths, flops, ratio, pub, err in rows:
        line = f"{name:<12} {_fmt_widths(widths):<28} {flops:>12.4e} {ratio:>6.3f}"
        if published:
            line += f" {pub * 1e10:>10.2e} {err:>8.2%}"
        print(line)
    if args.csv:
        lines = [f"# config_hash={chash} seed={args.seed}",
                 "name,widths,flops,ratio" + (",published,rel_err" if published else "")]
        for name, widths, flops, ratio, pub, err in rows:
            cells = [name, " ".join(map(str, widths)), str(flops), repr(ratio)]
            if published:
                cells += [repr(pub * 1e10), repr(err)]
            lines.append(",".join(cells))
        io.atomic_write(args.csv, ("\n".join(lines) + "\n").encode())
    return EXIT_OK


def cmd_gen(args, settings) -> int:
    from .data import SyntheticDatasetSpec, generate_synthetic, save_dataset
    spec = build(SyntheticDatasetSpec, settings, "data", seed=args.seed)
    ds = generate_synthetic(spec)
    chash = _hash(settings)
    out = os.path.join(args.run, "data")
    save_dataset(out, ds, {"config_hash": chash, "seed": args.seed})
    print(f"config_hash={chash} seed={args.seed}")
    print(f"wrote {out}: {len(ds.train_clips)} train clips, {len(ds.test_clips)} test clips, "
          f"{len(ds.long_train)}+{len(ds.long_test)} long videos")
    return EXIT_OK


def _load_data(args):
    from .data import load_dataset
    return load_dataset(os.path.join(args.run, "data"))


def _progress(every=100):
    def cb(step, schedule, loss):
        if step % every == 0:
            label = getattr(schedule, "label", schedule)
            log.info("step %d  loss %.4f  %s", step, loss, label)
    return cb


def cmd_train(args, settings) -> int:
    from . import io
    from .text import TextConfig
    from .train import TrainConfig, build_vocab, trace_csv, train_encoder
    from .video import EncoderConfig
    ds = _load_data(args)
    vocab = build_vocab(ds)
    vcfg = build(EncoderConfig, settings, "video")
    tcfg = build(TextConfig, settings, "text", vocab_size=len(vocab))
    cfg = build(TrainConfig, settings, "train", seed=args.seed)
    chash = _hash(settings)
    model, trace = train_encoder(cfg, ds, vcfg, tcfg, on_step=_progress())
    ckpt = os.path.join(args.run, "encoder.ckpt")
    model.save(ckpt, {"config_hash": chash, "seed": args.seed})
    loss_csv = os.path.join(args.run, "train_loss.csv")
    io.atomic_write(loss_csv, trace_csv(trace, chash, args.seed).encode())
    print(f"config_hash={chash} seed={args.seed}")
    print(f"{len(trace)} steps, final loss {trace[-1][2]:.4f}; wrote {ckpt} and {loss_csv}")
    return EXIT_OK


def _load_encoder(args):
    from .model import DualEncoder
    return DualEncoder.load(os.path.join(args.run, "encoder.ckpt"))


def cached_features(encoder, enc_hash, videos, S, schedules, cache_dir) -> dict:
    """Segment features per schedule, read from ``.cache`` records when present."""
    import numpy as np

    from . import io
    from .train import cache_features
    base = os.path.join(cache_dir, enc_hash[:16])
    os.makedirs(base, exist_ok=True)
    out = {}
    for name in schedules:
        paths = [os.path.join(base, f"long{i}.{name}.s{S}.cache") for i in range(len(videos))]
        missing = [i for i, p in enumerate(paths) if not os.path.exists(p)]
        if missing:
            fresh = cache_features(encoder, videos[missing], S, [name])[name]
            for i, f in zip(missing, fresh):
                io.write_feature_record(paths[i], f"long{i}", name, f)
        feats = []
        for i, p in enumerate(paths):
            vid, sched, f = io.read_feature_record(p)
            if (vid, sched) != (f"long{i}", name) or f.shape[0] != S:
                raise io.FormatError(f"{p}: record is for {vid}/{sched} with {f.shape[0]} "
                                     "segments")
            feats.append(f)
        out[name] = np.stack(feats)
    return out


def cmd_train_agg(args, settings) -> int:
    from . import io
    from .aggregator import AggregatorConfig
    from .train import TrainConfig, trace_csv, train_aggregator
    ds = _load_data(args)
    ckpt = os.path.join(args.run, "encoder.ckpt")
    before = io.file_hash(ckpt)
    enc = _load_encoder(args)
    S = settings["agg_train.segments"] or ds.spec.long_segments
    pooling = settings["agg_train.pooling"]
    if pooling not in ("transformer", "mean"):
        raise UsageError(f"agg_train.pooling must be transformer or mean, got {pooling!r}")
    feats = cached_features(enc, before, ds.long_train, S,
                            _names(settings["agg_train.schedules"]),
                            os.path.join(args.run, "cache"))
    acfg = build(AggregatorConfig, settings, "agg", embed_dim=enc.video_config.embed_dim)
    cfg = build(TrainConfig, settings, "agg_train", seed=args.seed)
    chash = _hash(settings)
    model, trace = train_aggregator(cfg, feats, ds.long_train_seq, ds.summaries, enc, acfg,
                                    pooling, on_step=_progress())
    if io.file_hash(ckpt) != before:
        raise CheckFailed("encoder checkpoint changed during aggregator training")
    out = os.path.join(args.run, f"agg-{pooling}.ckpt")
    model.save(out, {"config_hash": chash, "seed": args.seed, "encoder_hash": before})
    loss_csv = os.path.join(args.run, f"agg-{pooling}_loss.csv")
    io.atomic_write(loss_csv, trace_csv(trace, chash, args.seed).encode())
    print(f"config_hash={chash} seed={args.seed} encoder_hash={before[:16]} (unchanged)")
    print(f"{len(trace)} steps, final loss {trace[-1][2]:.4f}; wrote {out} and {loss_csv}")
    return EXIT_OK


def _long_models(args) -> dict:
    from .model import LongVideoModel
    out = {}
    for pooling in ("transformer", "mean"):
        path = os.path.join(args.run, f"agg-{pooling}.ckpt")
        if os.path.exists(path):
            out[pooling] = LongVideoModel.load(path)
    return out


def cmd_eval(args, settings) -> int:
    import json

    from . import io
    from .evaluate import build_mcq_items, mcq_eval, sweep
    from .video import named_schedule
    ds = _load_data(args)
    enc = _load_encoder(args)
    chash = _hash(settings)
    k, n_items = settings["eval.k"], settings["eval.n_items"]
    inter = build_mcq_items(ds, k, n_items, "inter", args.seed)
    intra = build_mcq_items(ds, k, n_items, "intra", args.seed)
    metrics = {}
    long_len = ds.spec.long_segments * ds.spec.frames
    longs = _long_models(args)
    for name in _names(settings["eval.schedules"]):
        sched = named_schedule(name, enc.video_config)
        metrics[f"{name}/mcq_inter"] = mcq_eval(enc, inter[0], sched, inter[1])
        metrics[f"{name}/mcq_intra"] = mcq_eval(enc, intra[0], sched, intra[1])
        for pooling, lm in longs.items():
            res = sweep(enc, ds, [sched], [long_len], "retrieval", args.seed, long_model=lm)
            for row in res.rows:
                metrics[f"{name}/{pooling}/{row.metric}"] = row.value
    print(f"config_hash={chash} seed={args.seed}")
    for key, value in metrics.items():
        print(f"{key} {value:.4f}")
    out = os.path.join(args.run, "eval.json")
    io.atomic_write(out, json.dumps({"config_hash": chash, "seed": args.seed,
                                     "metrics": metrics}, indent=2, sort_keys=True).encode())
    return EXIT_OK


def cmd_sweep(args, settings) -> int:
    from . import io
    from .evaluate import frame_sweep_classifier, sweep
    if args.schedules:
        settings["eval.schedules"] = args.schedules
    if args.frames:
        settings["eval.frames"] = args.frames
    if args.benchmark:
        settings["eval.benchmark"] = args.benchmark
    ds = _load_data(args)
    enc = _load_encoder(args)
    chash = _hash(settings)
    bench = settings["eval.benchmark"]
    names = _names(settings["eval.schedules"])
    frames = _ints(settings["eval.frames"])
    if bench == "mcq":
        res = sweep(enc, ds, names, frames or [ds.spec.frames], "mcq", args.seed,
                    n_items=settings["eval.n_items"], mcq_mode=settings["eval.mcq_mode"])
    elif bench == "retrieval":
        longs = _long_models(args)
        pooling = settings["agg_train.pooling"]
        if pooling not in longs:
            raise UsageError(f"retrieval sweep needs {args.run}/agg-{pooling}.ckpt "
                             "(run train-agg first)")
        res = sweep(enc, ds, names, frames or [ds.spec.long_segments * ds.spec.frames],
                    "retrieval", args.seed, long_model=longs[pooling])
    elif bench == "frames":
        res = frame_sweep_classifier(enc, ds, frames or [ds.spec.frames], names, args.seed)
    else:
        raise UsageError(f"unknown benchmark {bench!r}")
    text = res.to_csv(chash, args.seed)
    out = args.out or os.path.join(args.run, "sweep.csv")
    io.atomic_write(out, text.encode())
    sys.stdout.write(text)
    return EXIT_OK


def cmd_selfcheck(args, settings) -> int:
    from .selfcheck import run_selfcheck
    return EXIT_OK if run_selfcheck() else EXIT_FAIL


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    epilog = keys_help()
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value settings file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one setting (repeatable)")
    common.add_argument("--seed", type=int, default=0, help="root seed (default 0)")
    common.add_argument("--threads", type=int, default=1,
                        help="BLAS thread cap, applied before numpy loads (default 1)")
    common.add_argument("--run", default="run", help="working directory (default ./run)")

    parser = argparse.ArgumentParser(prog="adavid", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text, description=help_text,
                              epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)

    p = add("flops", "closed-form FLOPs of a width schedule")
    p.add_argument("--table1", action="store_true",
                   help="all ten named schedules at T=4, N=196, D=768, L=12")
    p.add_argument("--schedule", help="named schedule, e.g. d-dec or d-inc-low")
    p.add_argument("--mode", default="space-time", choices=["space-time", "dense", "hier"])
    p.add_argument("--T", type=int, default=4, help="frames (default 4)")
    p.add_argument("--N", type=int, default=196, help="patches per frame (default 196)")
    p.add_argument("--D", type=int, default=768, help="full width (default 768)")
    p.add_argument("--L", type=int, default=12, help="layers (default 12)")
    p.add_argument("--S", type=int, default=1, help="segments for --mode hier (default 1)")
    p.add_argument("--csv", help="also write the table as CSV to this path")
    p.set_defaults(func=cmd_flops)

    add("gen", "generate the synthetic dataset into RUN/data").set_defaults(func=cmd_gen)
    add("train", "train the dual encoder").set_defaults(func=cmd_train)
    add("train-agg", "train the long-video aggregator on frozen encoder features"
        ).set_defaults(func=cmd_train_agg)
    add("eval", "MCQ and retrieval metrics for each schedule").set_defaults(func=cmd_eval)
    p = add("sweep", "accuracy or recall against FLOPs over schedules and frame counts")
    p.add_argument("--schedules", help="comma list; overrides eval.schedules")
    p.add_argument("--frames", help="comma list; overrides eval.frames")
    p.add_argument("--benchmark", choices=["mcq", "retrieval", "frames"],
                   help="overrides eval.benchmark")
    p.add_argument("--out", help="CSV path (default RUN/sweep.csv)")
    p.set_defaults(func=cmd_sweep)
    add("selfcheck", "run the invariant suite; exit 1 on any failure"
        ).set_defaults(func=cmd_selfcheck)
    return parser


def _cap_threads(argv) -> None:
    n = "1"
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            n = argv[i + 1]
        elif a.startswith("--threads="):
            n = a.split("=", 1)[1]
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = n


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _cap_threads(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: --help exits 0, usage errors exit 2
        return int(exc.code or 0)
    from .io import FormatError
    from .tensor import RejectedInput
    try:
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        settings = resolve_settings(args.config, args.set)
        return args.func(args, settings)
    except (UsageError, RejectedInput) as exc:
        print(f"adavid {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError, KeyError) as exc:
        print(f"adavid {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (CheckFailed, FloatingPointError) as exc:
        print(f"adavid {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
