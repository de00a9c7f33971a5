"""Command-line interface.

Exit status: 0 on success, 2 for usage errors (bad flags, malformed config),
1 for any other failure. Machine-readable results go to files, a short
human summary to stdout.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import codec as _codec
from .alignment import CodebookConfig
from .channel import (DatasetIOError, EnvironmentSpec, SystemConfig, from_array, generate_dataset,
                      load_dataset, make_environments, save_dataset)
from .container import ContainerError, atomic_write
from .harness import (CONFIG_VERSION, ConfigError, ExperimentConfig, format_summary, load_config,
                      run_experiment, sweep_bits, sweep_train_envs, write_table)
from .pipeline import (FeedbackMessage, decouple_and_align, eg_decode_batch, load_message_bytes,
                       messages_from_aligned, nmse, nmse_batch, overhead_report, save_messages,
                       write_report_jsonl)
from .transforms import to_angular_delay

log = logging.getLogger("egcsi")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- shared settings -------------------------------------------------------------

def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc


def _settings(args):
    """(SystemConfig, CodebookConfig, eta, r_max) from --config plus flag overrides."""
    raw = {}
    if args.config:
        raw = _read_json(args.config)
        if not isinstance(raw, dict) or raw.get("version") != CONFIG_VERSION:
            raise ConfigError(f"{args.config}: expected a version {CONFIG_VERSION} config object")
    try:
        sys_d = dict(raw.get("system", {}))
        if sys_d.get("upa_shape") is not None:
            sys_d["upa_shape"] = tuple(sys_d["upa_shape"])
        system = SystemConfig.from_dict(sys_d) if sys_d else SystemConfig()
        cb = CodebookConfig.from_dict(raw["codebook"]) if "codebook" in raw else CodebookConfig()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    eta = raw.get("eta", 0.99) if args.eta is None else args.eta
    r_max = raw.get("r_max", 16) if args.r_max is None else (None if args.r_max <= 0 else args.r_max)
    if not 0.0 < eta <= 1.0:
        raise ConfigError("eta must lie in (0, 1]")
    return system, cb, float(eta), r_max


def _add_common(p, settings=True):
    p.add_argument("--config", help="JSON config file (version %d)" % CONFIG_VERSION)
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    if settings:
        p.add_argument("--eta", type=float, help="energy threshold for decoupling")
        p.add_argument("--r-max", type=int, help="cap on path components (<= 0 removes the cap)")


def _load_sets(paths):
    sets = [load_dataset(p) for p in paths]
    if not sets:
        raise UsageError("no datasets given")
    cfg = sets[0].cfg
    if any(d.cfg != cfg for d in sets):
        raise ValueError("datasets have different system configurations")
    return sets


# -- subcommands ----------------------------------------------------------------------

def cmd_gen_envs(args):
    overrides = {}
    if args.los_probability is not None:
        overrides["los_probability"] = args.los_probability
    envs = make_environments(args.count, args.seed, prefix=args.prefix, **overrides)
    doc = {"version": CONFIG_VERSION, "environments": [e.to_dict() for e in envs]}
    atomic_write(args.out, (json.dumps(doc, sort_keys=True, indent=2) + "\n").encode())
    print(f"wrote {len(envs)} environments to {args.out}")


def _environments_from(args):
    raw = _read_json(args.envs)
    try:
        envs = [EnvironmentSpec.from_dict(d) for d in raw["environments"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{args.envs}: bad environment file ({exc})") from exc
    if args.env_id:
        wanted = set(args.env_id)
        envs = [e for e in envs if e.env_id in wanted]
        missing = wanted - {e.env_id for e in envs}
        if missing:
            raise ConfigError(f"unknown env_id(s) {sorted(missing)}")
    return envs


def cmd_gen_data(args):
    system, _, _, _ = _settings(args)
    envs = _environments_from(args)
    if not os.path.isdir(args.out_dir):
        raise DatasetIOError(f"output directory does not exist: {args.out_dir}")
    for env in envs:
        ds = generate_dataset(env, args.samples, system, seed=args.seed)
        path = os.path.join(args.out_dir, f"{env.env_id}.egds")
        save_dataset(path, ds)
        print(f"{env.env_id}: {args.samples} channels -> {path}")


def cmd_train_codec(args):
    system, cb, eta, r_max = _settings(args)
    sets = _load_sets(args.data)
    H = np.concatenate([d.channels for d in sets])
    if args.features == "aligned":
        X = decouple_and_align(H, eta, cb, sets[0].cfg, r_max).aligned
    else:
        X = to_angular_delay(H, sets[0].cfg)
    spec = _codec.train(args.kind, X, args.M, args.Q_f)
    _codec.save_codec(args.out, spec)
    print(f"trained {args.kind} (M={args.M}, Q_f={args.Q_f}) on {len(X)} {args.features} samples; "
          f"q_f={spec.bits_per_component} bits; fingerprint {spec.fingerprint()} -> {args.out}")


def cmd_encode(args):
    _, cb, eta, r_max = _settings(args)
    ds = load_dataset(args.data)
    spec = _codec.load_codec(args.codec)
    aset = decouple_and_align(ds.channels, eta, cb, ds.cfg, r_max)
    msgs = messages_from_aligned(aset, spec, ds.cfg, cb)
    header = {"system": ds.cfg.to_dict(), "codebook": cb.to_dict(), "eta": eta, "r_max": r_max,
              "env_id": ds.env_id, "codec_fingerprint": spec.fingerprint()}
    save_messages(args.out, msgs, header)
    rep = overhead_report(msgs, [ds.env_id] * len(msgs))
    print(f"encoded {len(msgs)} channels: mean R_hat {rep.mean_r_hat:.3f}, mean bits {rep.mean_bits:.2f} -> {args.out}")


def _stream_settings(header):
    sys_d = dict(header["system"])
    if sys_d.get("upa_shape") is not None:
        sys_d["upa_shape"] = tuple(sys_d["upa_shape"])
    return SystemConfig.from_dict(sys_d), CodebookConfig.from_dict(header["codebook"])


def _report_rows(env_id, H, H_hat, msgs):
    errs = nmse(H, H_hat)
    return [{"env_id": env_id, "nmse_db": float(e), "r_hat": m.r_hat, "bits": m.total_bits}
            for e, m in zip(np.atleast_1d(errs), msgs)]


def _finish_report(args, env_id, H, H_hat, msgs):
    rows = _report_rows(env_id, H, H_hat, msgs)
    summary = {"env_id": env_id, "n": len(rows), "nmse_db": nmse_batch(H, H_hat),
               **overhead_report(msgs, [env_id] * len(msgs)).to_dict()}
    if args.report:
        write_report_jsonl(args.report, rows)
    if args.summary:
        atomic_write(args.summary, (json.dumps(summary, sort_keys=True, indent=2) + "\n").encode())
    print(f"{env_id}: {len(rows)} channels, NMSE {summary['nmse_db']:.4f} dB, mean bits {summary['mean_bits']:.2f}")


def cmd_decode(args):
    header, blobs = load_message_bytes(args.stream)
    system, cb = _stream_settings(header)
    spec = _codec.load_codec(args.codec)
    if spec.fingerprint() != header.get("codec_fingerprint"):
        raise ValueError("codec does not match the one used to encode the stream")
    msgs = []
    for i, blob in enumerate(blobs):
        try:
            msgs.append(FeedbackMessage.from_bytes(blob, system, cb, spec))
        except ValueError as exc:
            raise ValueError(f"message {i}: {exc}") from exc
    H_hat = eg_decode_batch(msgs, cb, spec, system)
    if args.out:
        save_dataset(args.out, from_array(H_hat, system, header["env_id"], source="reconstruction"))
    if args.reference:
        ref = load_dataset(args.reference)
        if ref.channels.shape != H_hat.shape:
            raise ValueError("reference dataset does not match the stream")
        _finish_report(args, header["env_id"], ref.channels, H_hat, msgs)
    else:
        print(f"decoded {len(msgs)} channels")


def cmd_eval(args):
    _, cb, eta, r_max = _settings(args)
    spec = _codec.load_codec(args.codec)
    ds = load_dataset(args.data)
    aset = decouple_and_align(ds.channels, eta, cb, ds.cfg, r_max)
    msgs = messages_from_aligned(aset, spec, ds.cfg, cb)
    H_hat = eg_decode_batch(msgs, cb, spec, ds.cfg)
    _finish_report(args, ds.env_id, ds.channels, H_hat, msgs)


def _experiment_config(args):
    cfg = load_config(args.config)
    overrides = {}
    if args.seeds:
        overrides["seeds"] = [int(s) for s in args.seeds.split(",")]
    elif args.seed_given:
        overrides["seeds"] = [args.seed]
    if args.eta is not None:
        overrides["eta"] = args.eta
    if args.r_max is not None:
        overrides["r_max"] = None if args.r_max <= 0 else args.r_max
    if args.samples is not None:
        overrides["samples_per_env"] = args.samples
    if args.test_samples is not None:
        overrides["test_samples_per_env"] = args.test_samples
    if args.out_dir:
        overrides["output_dir"] = args.out_dir
    return replace(cfg, **overrides).validate()


def _check_out_dir(cfg):
    if not os.path.isdir(cfg.output_dir):
        raise FileNotFoundError(f"output directory does not exist: {cfg.output_dir}")


def cmd_experiment(args):
    cfg = _experiment_config(args)
    _check_out_dir(cfg)
    table = run_experiment(cfg)
    paths = write_table(table, os.path.join(cfg.output_dir, cfg.name))
    print(format_summary(table))
    print("wrote " + ", ".join(paths))


def cmd_sweep(args):
    cfg = _experiment_config(args)
    _check_out_dir(cfg)
    try:
        grid = [int(v) for v in args.grid.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--grid must be comma-separated integers ({exc})") from exc
    if not grid:
        raise UsageError("--grid is empty")
    if args.axis == "bits":
        table = sweep_bits(cfg, grid)
    else:
        table = sweep_train_envs(cfg, grid)
    paths = write_table(table, os.path.join(cfg.output_dir, f"{cfg.name}-sweep-{args.axis}"))
    print(format_summary(table))
    print("wrote " + ", ".join(paths))


# -- parser -----------------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="egcsi", description="Environment-generalisable CSI feedback toolkit")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-envs", help="draw a family of random environments")
    _add_common(p, settings=False)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--prefix", default="env")
    p.add_argument("--los-probability", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_envs)

    p = sub.add_parser("gen-data", help="generate one dataset file per environment")
    _add_common(p, settings=False)
    p.add_argument("--envs", required=True, help="environment file from gen-envs")
    p.add_argument("--env-id", action="append", help="restrict to these environments")
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_gen_data, eta=None, r_max=None)

    p = sub.add_parser("train-codec", help="train a codec on aligned components or raw H_ad")
    _add_common(p)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--kind", default="linear_pca", choices=list(_codec.codec_kinds()))
    p.add_argument("--M", type=int, default=8)
    p.add_argument("--Q-f", dest="Q_f", type=int, default=6)
    p.add_argument("--features", default="aligned", choices=["aligned", "raw"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_codec)

    p = sub.add_parser("encode", help="encode a dataset into a feedback stream")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decode a feedback stream")
    _add_common(p, settings=False)
    p.add_argument("--stream", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--out", help="write reconstructed channels as a dataset")
    p.add_argument("--reference", help="original dataset, for NMSE")
    p.add_argument("--report", help="per-sample JSON lines report (needs --reference)")
    p.add_argument("--summary", help="summary JSON (needs --reference)")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="run the in-memory pipeline on a dataset")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--report")
    p.add_argument("--summary")
    p.set_defaults(func=cmd_eval)

    for name, func, text in (("experiment", cmd_experiment, "EG versus vanilla on unseen environments"),
                             ("sweep", cmd_sweep, "sweep feedback bits or training-environment count")):
        p = sub.add_parser(name, help=text)
        _add_common(p)
        p.add_argument("--seeds", help="comma-separated run seeds (overrides --seed)")
        p.add_argument("--samples", type=int, help="training samples per environment")
        p.add_argument("--test-samples", type=int, help="test samples per environment")
        p.add_argument("--out-dir")
        if name == "sweep":
            p.add_argument("--axis", choices=["bits", "envs"], required=True)
            p.add_argument("--grid", required=True, help="comma-separated M values or env counts")
        p.set_defaults(func=func)
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.seed_given = any(a == "--seed" or a.startswith("--seed=") for a in argv)
        if args.command in ("experiment", "sweep") and not args.config:
            raise UsageError(f"{args.command} needs --config")
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, ContainerError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
