"""Command-line entry point: ``wavesense <command> [options]``.

Exit status is 0 on success, 1 for usage or validation errors, and 2 for
runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

log = logging.getLogger("wavesense")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p):
    p.add_argument("--seed", type=int, default=None, help="random seed (overrides config)")
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS threads (default: $WAVESENSE_THREADS)")
    p.add_argument("-o", "--override", action="append", default=[], metavar="KEY=VALUE",
                   help="config override, repeatable")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wavesense", description="Spiking WaveNet-style keyword spotting.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("preprocess", help="convert a WAV manifest into spike rasters")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--noise-dir")
    p.add_argument("--snr-db", type=float, default=5.0)
    p.add_argument("--seconds", type=float, default=5.0)
    p.add_argument("--augment", type=int, default=1, help="noisy copies per training clip")
    _common(p)

    p = sub.add_parser("synth-data", help="write the synthetic keyword dataset")
    p.add_argument("--spec", help="key = value file of synthetic dataset settings")
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("train", help="train a network on a raster dataset")
    p.add_argument("--config", default="synthetic", help="config file or preset name")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="JSON-lines metrics log (default: <out>.log.jsonl)")
    _common(p)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a raster dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    _common(p)

    p = sub.add_parser("stream", help="FRR/FAPH of a checkpoint on a continuous stream")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--stream", required=True, help="WSRAS1 raster of the stream")
    p.add_argument("--labels", required=True, help="class<TAB>start<TAB>end lines, seconds")
    p.add_argument("--target-faph", type=float, default=0.5)
    p.add_argument("--lockout", type=float, default=1.0)
    p.add_argument("--match-window", type=float, default=0.75)
    p.add_argument("--sweep-out", help="write the per-threshold table here (TSV)")
    _common(p)

    p = sub.add_parser("gradcheck", help="compare BPTT gradients with finite differences")
    p.add_argument("--config", default="heysnips")
    p.add_argument("--bins", type=int, default=40)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--entries", type=int, default=200, help="minimum number of checked entries")
    p.add_argument("--tolerance", type=float, default=1e-4)
    _common(p)

    p = sub.add_parser("inspect", help="sizes, time constants and memory of a network")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--ckpt")
    g.add_argument("--config", default=None)
    _common(p)
    return parser


def _set_threads(n):
    if n is None:
        env = os.environ.get("WAVESENSE_THREADS")
        n = int(env) if env else None
    if n is not None:
        if n < 1:
            raise UsageError("--threads must be >= 1")
        for var in _THREAD_VARS:
            os.environ[var] = str(n)


def _resolve_config(name, overrides, seed=None):
    from .config import apply_overrides, format_config, load_config

    net, train = load_config(name or "heysnips")
    net, train = apply_overrides(net, train, overrides)
    if seed is not None:
        train = train.replace(seed=seed)
    log.info("resolved config:\n%s", format_config(net, train))
    return net, train


def _no_overrides(args, what):
    # the architecture of a checkpoint is fixed; silently ignoring -o would mislead
    if args.override:
        raise UsageError(f"{what} takes no config overrides")


def cmd_preprocess(args):
    from .datasets import preprocess_manifest

    _no_overrides(args, "preprocess")
    path = preprocess_manifest(args.manifest, args.out, noise_dir=args.noise_dir,
                               snr_db=args.snr_db, seconds=args.seconds, augment=args.augment,
                               seed=args.seed or 0)
    print(f"wrote {path}")


def _synthetic_spec(path, overrides, seed):
    import dataclasses

    from .config import ConfigError, _parse_value
    from .datasets import SyntheticSpec

    lines = []
    if path:
        with open(path) as fh:
            lines = fh.read().splitlines()
    lines += list(overrides)
    known = {f.name for f in dataclasses.fields(SyntheticSpec)}
    values = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path or '<overrides>'}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{path or '<overrides>'}:{lineno}: unknown key {key!r}")
        values[key] = _parse_value(raw)
    if seed is not None:
        values["seed"] = seed
    return SyntheticSpec(**values)


def cmd_synth_data(args):
    from .datasets import synth_keyword_dataset, write_dataset

    spec = _synthetic_spec(args.spec, args.override, args.seed)
    log.info("synthetic spec: %s", spec)
    ds = synth_keyword_dataset(spec)
    path = write_dataset(args.out, ds.splits)
    sizes = ", ".join(f"{k} {len(v)}" for k, v in ds.splits.items())
    print(f"wrote {path} ({sizes})")


def cmd_train(args):
    from .config import format_config
    from .datasets import load_dataset
    from .network import build
    from .trainer import Trainer, evaluate, save_checkpoint

    net_cfg, train_cfg = _resolve_config(args.config, args.override, args.seed)
    print(format_config(net_cfg, train_cfg), end="")
    data = load_dataset(args.data, net_cfg.n_classes)
    if "train" not in data:
        raise ValueError(f"{args.data}: no training split")
    shape = data["train"].x.shape
    if shape[1] != net_cfg.n_channels_in:
        raise ValueError(f"data has {shape[1]} channels, config expects {net_cfg.n_channels_in}")
    network = build(net_cfg, seed=train_cfg.seed)
    trainer = Trainer(network, train_cfg)
    log_path = args.log or args.out + ".log.jsonl"
    open(log_path, "w").close()

    def report(records):
        for r in records:
            print(f"epoch {r['epoch']:3d} {r['split']:5s} loss {r['loss']:.4f} acc {r['accuracy']:.3f}",
                  flush=True)

    trainer.fit(data["train"], data.get("val"), log_path=log_path, callback=report)
    crc = save_checkpoint(args.out, network, trainer)
    if "test" in data:
        tm = evaluate(network, data["test"])
        print(f"test accuracy {tm.accuracy:.4f}")
    print(f"checkpoint {args.out} crc32 {crc:08x}")


def cmd_eval(args):
    from .config import config_hash
    from .datasets import load_dataset
    from .trainer import evaluate, load_checkpoint

    _no_overrides(args, "eval")
    ckpt = load_checkpoint(args.ckpt)
    network = ckpt.network()
    data = load_dataset(args.data, ckpt.config.n_classes)
    print(f"checkpoint {args.ckpt} config hash {config_hash(ckpt.config):016x} epoch {ckpt.epoch}")
    print(f"{'split':6s} {'n':>6s} {'accuracy':>9s} {'loss':>8s}")
    for name, split in data.items():
        m = evaluate(network, split)
        print(f"{name:6s} {len(split):6d} {m.accuracy:9.4f} {m.loss:8.4f}")


def cmd_stream(args):
    from .frontend import read_raster
    from .streaming import compute_frr_faph, detect_on_trace, read_stream_labels, threshold_sweep
    from .streaming import stream_evaluate
    from .trainer import load_checkpoint

    _no_overrides(args, "stream")
    network = load_checkpoint(args.ckpt).network()
    raster = read_raster(args.stream)
    labels = read_stream_labels(args.labels)
    trace = stream_evaluate(network, raster, threshold=0.0, lockout=args.lockout).trace
    sweep = threshold_sweep(trace, raster, labels, args.target_faph, lockout=args.lockout,
                            match_window=args.match_window)
    classes = sorted({lab.cls for lab in labels}) or None
    dets = detect_on_trace(trace, sweep.threshold, args.lockout, raster.dt, classes)
    hours = raster.n_bins * raster.dt / 3600.0
    frr, faph = compute_frr_faph(dets, labels, hours, args.match_window)
    result = {"threshold": sweep.threshold, "frr": frr, "faph": faph, "target_met": sweep.met,
              "target_faph": args.target_faph, "detections": len(dets), "keywords": len(labels),
              "hours": hours}
    print(json.dumps(result, sort_keys=True))
    if not sweep.met:
        log.warning("no threshold reaches FAPH <= %g; reporting the strictest", args.target_faph)
    if args.sweep_out:
        with open(args.sweep_out, "w") as fh:
            fh.write("threshold\tfrr\tfaph\n")
            for thr, f, a in sweep.table:
                fh.write(f"{thr:.6g}\t{f:.6g}\t{a:.6g}\n")


def cmd_gradcheck(args):
    import numpy as np

    from .autodiff import finite_diff_check
    from .network import build, parameter_count

    net_cfg, _ = _resolve_config(args.config, args.override)
    seed = args.seed or 0
    network = build(net_cfg, seed=seed, dtype=np.float64, linear=True)
    rng = np.random.default_rng(seed)
    raster = rng.poisson(0.3, size=(net_cfg.n_channels_in, args.bins))
    label = int(rng.integers(net_cfg.n_classes))
    total = parameter_count(net_cfg)["total"]
    worst, report = finite_diff_check(network, (raster, label), args.eps, fraction=0.0, seed=seed,
                                      min_entries=min(args.entries, total))
    print(f"checked {len(report)} of {total} parameters")
    print(f"max relative error {worst:.3e}")
    if worst >= args.tolerance:
        raise RuntimeError(f"gradient check failed: {worst:.3e} >= {args.tolerance:g}")


def cmd_inspect(args):
    from .config import config_hash
    from .network import parameter_count, state_footprint, temporal_memory
    from .trainer import load_checkpoint

    if args.ckpt:
        _no_overrides(args, "inspect --ckpt")
        ckpt = load_checkpoint(args.ckpt)
        net_cfg = ckpt.config
        print(f"checkpoint {args.ckpt} (epoch {ckpt.epoch})")
    else:
        net_cfg, _ = _resolve_config(args.config, args.override)
    counts = parameter_count(net_cfg)
    mem = temporal_memory(net_cfg)
    print(f"config hash      {config_hash(net_cfg):016x}")
    print(f"classes          {net_cfg.n_classes}")
    print(f"weights          {counts['weights']}")
    print(f"biases           {counts['biases']}")
    print(f"parameters       {counts['total']}")
    print(f"spiking neurons  {counts['spiking_neurons']}")
    print(f"tau_s / tau_v    {net_cfg.tau_s:g} / {net_cfg.tau_v:g} bins")
    print(f"slow tau         {list(net_cfg.dilations)} bins")
    print(f"readout tau      {net_cfg.readout_tau:g} bins")
    print(f"temporal memory  {mem:g} bins ({mem * 0.01:g} s)")
    print("state footprint  (dilation: buffered values for a dilated convolution -> state values)")
    for d, (buf, state) in zip(net_cfg.dilations, state_footprint(net_cfg)):
        print(f"  d={d:<3d} {buf:4d} -> {state}")


COMMANDS = {
    "preprocess": cmd_preprocess,
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "stream": cmd_stream,
    "gradcheck": cmd_gradcheck,
    "inspect": cmd_inspect,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help(sys.stderr)
            return EXIT_INVALID
        _set_threads(args.threads)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ValueError, FileNotFoundError) as exc:
        # config, manifest, format and checkpoint validation errors are ValueErrors
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main(argv=None):
    sys.exit(run(argv))
