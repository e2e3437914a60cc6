"""Command line driver: ``run``, ``inspect``, ``report`` and ``--print-defaults``.

Outputs of ``run`` are byte-identical across reruns of the same config and
seed. Nothing time-dependent is written to the output directory.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import wire
from .fed import ExperimentConfig, RoundRecord, run_experiment
from .nnet import init_params

SEED_ENV = "FEDKLPR_SEED"
CSV_NAME = "rounds.csv"
SUMMARY_NAME = "summary.json"
LOG_NAME = "run_log.jsonl"
CONFIG_NAME = "config.yaml"
MESSAGE_DIR = "messages"
CSV_FIELDS = ["round", "client", "rank1", "mAP", "pruning_ratio", "klaw", "weight", "upload_bytes", "download_bytes"]

log = logging.getLogger("fedklpr")


class ConfigError(ValueError):
    pass


# --- config ---------------------------------------------------------------------

def _coerce(key: str, default, value):
    if dataclasses.is_dataclass(default):
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected a mapping")
        return _build(type(default), value, key + ".")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, (list, tuple)):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return type(default)(value)
    return value


def _build(cls, raw: dict, prefix: str = ""):
    default = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown config key {prefix}{unknown[0]}")
    kwargs = {k: _coerce(prefix + k, getattr(default, k), v) for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        msg = str(exc)
        if "gamma_agg" in msg and "delta_agg" in msg:
            msg = msg.replace("gamma_agg", f"{prefix}gamma_agg").replace("delta_agg", f"{prefix}delta_agg")
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {msg}") from exc


def parse_seed(text: str) -> int:
    try:
        seed = int(text, 10)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an unsigned 64-bit integer, got {text!r}") from None
    if not 0 <= seed < 2**64:
        raise ConfigError(f"{SEED_ENV} out of range: {seed}")
    return seed


def config_from_dict(raw: dict | None) -> ExperimentConfig:
    raw = dict(raw or {})
    if "net" in raw or "data" in raw:
        # keep the two input dimensions in step when only one is given
        net, data = dict(raw.get("net") or {}), dict(raw.get("data") or {})
        if "input_dim" in net and "input_dim" not in data:
            data["input_dim"] = net["input_dim"]
        elif "input_dim" in data and "input_dim" not in net:
            net["input_dim"] = data["input_dim"]
        raw["net"], raw["data"] = net, data
    return _build(ExperimentConfig, raw)


def load_config(path, env=None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    cfg = config_from_dict(raw)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        cfg = dataclasses.replace(cfg, seed=parse_seed(env[SEED_ENV]))
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    def plain(v):
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [plain(x) for x in v]
        return v

    return plain(dataclasses.asdict(cfg))


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


# --- run ------------------------------------------------------------------------

def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


def _dumps(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, allow_nan=True)


def dense_model_bytes(cfg: ExperimentConfig) -> int:
    return wire.dense_bytes(init_params(cfg.net))


def csv_rows(records: list[RoundRecord]) -> list[list]:
    return [
        [r.round, s.client_id, repr(s.rank1), repr(s.mAP), repr(s.pruning_ratio), repr(s.klaw),
         repr(s.weight), s.upload_bytes, s.download_bytes]
        for r in records
        for s in r.clients
    ]


def write_csv(path: Path, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def summarize(cfg: ExperimentConfig, rows: list[dict]) -> dict:
    """Final metrics and communication totals from parsed CSV rows."""
    dense = dense_model_bytes(cfg)
    last_round = max(r["round"] for r in rows)
    clients = sorted({r["client"] for r in rows})
    per_client = []
    for k in clients:
        mine = [r for r in rows if r["client"] == k]
        final = next(r for r in mine if r["round"] == last_round)
        up = sum(r["upload_bytes"] for r in mine)
        down = sum(r["download_bytes"] for r in mine)
        dense_cc = 2 * dense * len(mine)
        per_client.append({
            "client": k,
            "rank1": final["rank1"],
            "mAP": final["mAP"],
            "pruning_ratio": final["pruning_ratio"],
            "upload_bytes": up,
            "download_bytes": down,
            "total_cc_bytes": up + down,
            "upload_reduction": 1.0 - up / (dense * len(mine)),
            "cc_reduction": 1.0 - (up + down) / dense_cc,
        })
    up = sum(c["upload_bytes"] for c in per_client)
    down = sum(c["download_bytes"] for c in per_client)
    dense_up = dense * len(rows)
    return {
        "rounds": last_round,
        "clients": per_client,
        "mean_rank1": float(np.mean([c["rank1"] for c in per_client])),
        "mean_mAP": float(np.mean([c["mAP"] for c in per_client])),
        "mean_pruning_ratio": float(np.mean([c["pruning_ratio"] for c in per_client])),
        "dense_model_bytes": dense,
        "total_upload_bytes": up,
        "total_download_bytes": down,
        "total_cc_bytes": up + down,
        "dense_upload_bytes": dense_up,
        "dense_cc_bytes": 2 * dense_up,
        "upload_reduction": 1.0 - up / dense_up,
        "cc_reduction": 1.0 - (up + down) / (2 * dense_up),
    }


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        out = []
        for r in csv.DictReader(fh):
            out.append({
                "round": int(r["round"]), "client": int(r["client"]),
                "rank1": float(r["rank1"]), "mAP": float(r["mAP"]),
                "pruning_ratio": float(r["pruning_ratio"]), "klaw": float(r["klaw"]),
                "weight": float(r["weight"]),
                "upload_bytes": int(r["upload_bytes"]), "download_bytes": int(r["download_bytes"]),
            })
    return out


def run_to_dir(cfg: ExperimentConfig, out: Path, parallel_workers: int | None = None) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_NAME).write_text(dump_config(cfg))
    msg_dir = out / MESSAGE_DIR
    msg_dir.mkdir(exist_ok=True)

    def keep_final(rnd, client_id, msg):
        if rnd == cfg.rounds:
            (msg_dir / f"round{rnd:03d}_client{client_id:02d}.fklp").write_bytes(msg)

    with open(out / LOG_NAME, "w") as fh:
        def on_round(rec: RoundRecord):
            for s in rec.clients:
                fh.write(_dumps({
                    "round": rec.round, "client": s.client_id, "rank1": s.rank1, "mAP": s.mAP,
                    "pruning_ratio": s.pruning_ratio, "klaw": s.klaw, "weight": s.weight,
                    "upload_bytes": s.upload_bytes, "download_bytes": s.download_bytes,
                    "global_checksum": rec.global_checksum, "events": s.events,
                }) + "\n")
            fh.flush()
            log.info("round %d/%d done", rec.round, cfg.rounds)

        records = run_experiment(cfg, parallel_workers=parallel_workers, on_round=on_round, on_upload=keep_final)
    write_csv(out / CSV_NAME, csv_rows(records))
    summary = summarize(cfg, read_csv(out / CSV_NAME))
    summary["seed"] = cfg.seed
    summary["final_global_checksum"] = records[-1].global_checksum
    (out / SUMMARY_NAME).write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return summary


def cmd_run(args) -> int:
    if args.print_defaults:
        sys.stdout.write(dump_config(ExperimentConfig()))
        return 0
    if args.config is None or args.out is None:
        print("error: run needs <config> and --out <dir>", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    summary = run_to_dir(cfg, Path(args.out), args.workers)
    print(f"mean Rank-1 {summary['mean_rank1']:.4f}  mean pruning ratio {summary['mean_pruning_ratio']:.3f}  "
          f"upload reduction {100 * summary['upload_reduction']:.1f}%")
    return 0


# --- inspect / report -----------------------------------------------------------

def describe_message(data: bytes) -> str:
    rep = wire.decode(data)
    lines = [
        f"client {rep.client_id}  round {rep.round}  version {wire.VERSION}",
        f"pruning_ratio {rep.pruning_ratio!r}  klaw {rep.klaw_raw!r}",
        f"layers {len(rep.params.layers)}  total bytes {len(data)}",
    ]
    for layer, ml in zip(rep.params.layers, rep.mask.layers):
        n = ml.bits.size
        kept = int(np.count_nonzero(ml.bits))
        kind = "prunable" if ml.prunable else "dense"
        lines.append(
            f"  {layer.name:<16} {'x'.join(map(str, layer.shape)):>10} {kind:<8} "
            f"sparsity {100.0 * (n - kept) / n:6.2f}%  bytes {wire.layer_body_bytes(n, kept)}"
        )
    return "\n".join(lines)


def cmd_inspect(args) -> int:
    try:
        data = Path(args.message).read_bytes()
    except OSError as exc:
        print(f"error: cannot read {args.message}: {exc.strerror}", file=sys.stderr)
        return 2
    try:
        print(describe_message(data))
    except wire.WireError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return 1
    return 0


def format_report(summary: dict) -> str:
    head = f"{'client':>6} {'rank1':>7} {'mAP':>7} {'ratio':>6} {'total_cc':>12} {'upload_red%':>11} {'cc_red%':>8}"
    lines = [head]
    for c in summary["clients"]:
        lines.append(
            f"{c['client']:>6} {c['rank1']:7.4f} {c['mAP']:7.4f} {c['pruning_ratio']:6.3f} "
            f"{c['total_cc_bytes']:>12} {100 * c['upload_reduction']:11.2f} {100 * c['cc_reduction']:8.2f}"
        )
    lines.append(
        f"{'all':>6} {summary['mean_rank1']:7.4f} {summary['mean_mAP']:7.4f} {summary['mean_pruning_ratio']:6.3f} "
        f"{summary['total_cc_bytes']:>12} {100 * summary['upload_reduction']:11.2f} {100 * summary['cc_reduction']:8.2f}"
    )
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    out = Path(args.dir)
    missing = [n for n in (CSV_NAME, CONFIG_NAME) if not (out / n).is_file()]
    if missing:
        print(f"error: {out} lacks {', '.join(missing)}", file=sys.stderr)
        return 2
    try:
        cfg = load_config(out / CONFIG_NAME, env={})
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    sys.stdout.write(format_report(summarize(cfg, read_csv(out / CSV_NAME))))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedklpr", description="Federated re-ID simulator with adaptive pruning.")
    p.add_argument("--print-defaults", action="store_true", help="print the default config and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")
    r = sub.add_parser("run", help="run an experiment")
    r.add_argument("config", nargs="?")
    r.add_argument("--out")
    r.add_argument("--workers", type=int, default=None, help="client worker processes (0 = sequential)")
    r.add_argument("--print-defaults", action="store_true")
    r.set_defaults(func=cmd_run)
    i = sub.add_parser("inspect", help="decode an upload message")
    i.add_argument("message")
    i.set_defaults(func=cmd_inspect)
    rep = sub.add_parser("report", help="per-client summary of a run directory")
    rep.add_argument("dir")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.print_defaults and args.command is None:
        sys.stdout.write(dump_config(ExperimentConfig()))
        return 0
    if args.command is None:
        parser.print_help()
        return 2
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
