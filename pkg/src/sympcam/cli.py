"""``sympcam`` command-line entry point.

Subcommands: synth, preprocess, train, evaluate, sweep, stress, report. Every
command writes ``manifest.json`` (resolved config, its hash, package version
and seed) into its output directory. Exit status is 0 on success, 2 for bad
configuration and 1 for runtime failures; failures also print a one-line JSON
object to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .errors import ConfigError

logger = logging.getLogger("sympcam")

CACHE_ENV = "SYMPCAM_CACHE"
CONFIG_SECTIONS = ("synth", "preprocess", "model", "train", "stress")


def cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "sympcam"))


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(cfg) - set(CONFIG_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}; allowed {CONFIG_SECTIONS}")
    return cfg


def _build(cls, values: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def write_manifest(out: Path, command: str, config: dict, seed: Optional[int]) -> Path:
    blob = json.dumps(config, sort_keys=True, default=str)
    manifest = {
        "command": command,
        "config": json.loads(blob),
        "config_hash": hashlib.sha256(blob.encode()).hexdigest(),
        "version": __version__,
        "seed": seed,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    out.mkdir(parents=True, exist_ok=True)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_synth(args, cfg) -> dict:
    from .dataset import SynthConfig, generate_dataset

    values = dict(cfg.get("synth", {}))
    if args.participants is not None:
        values["n_participants"] = args.participants
    if args.seed is not None:
        values["seed"] = args.seed
    if args.duration is not None:
        values["duration_s"] = args.duration
    synth = _build(SynthConfig, values)
    sessions = generate_dataset(synth, args.out)
    logger.info("wrote %d sessions to %s", len(sessions), args.out)
    return {"synth": dataclasses.asdict(synth)}


def _preprocess_params(args, cfg) -> dict:
    params = {"size": 72, "fs_out": 10.0, "fallback_box": None, "screen": True}
    params.update(cfg.get("preprocess", {}))
    for key in ("size", "fs_out", "fallback_box"):
        v = getattr(args, key, None)
        if v is not None:
            params[key] = v
    unknown = set(params) - {"size", "fs_out", "fallback_box", "screen"}
    if unknown:
        raise ConfigError(f"unknown preprocess keys {sorted(unknown)}")
    return params


def cmd_preprocess(args, cfg) -> dict:
    from .dataset import list_sessions, load_session, screen_responders
    from .errors import InsufficientDataError
    from .preprocess import cache_key, prepare_session, save_prepared

    params = _preprocess_params(args, cfg)
    out = Path(args.out) if args.out else cache_dir() / cache_key({**params, "data": str(Path(args.data).resolve())})
    args.out = str(out)
    kept, skipped = [], []
    for path in list_sessions(args.data):
        session = load_session(path)
        if params["screen"]:
            try:
                screening = screen_responders(session)
            except InsufficientDataError:
                screening = None
            if screening is not None and not screening.responsive:
                logger.info("%s: non-responder (p=%.3g), skipped", session.participant_id, screening.p_value)
                skipped.append(session.participant_id)
                continue
        prepared = prepare_session(session, params["size"], params["fs_out"],
                                   fallback_box=params["fallback_box"])
        save_prepared(prepared, out / session.participant_id, params)
        kept.append(session.participant_id)
    (out / "screening.json").write_text(json.dumps({"kept": kept, "skipped": skipped}, indent=2) + "\n")
    print(out)
    return {"preprocess": params, "data": str(args.data), "kept": kept, "skipped": skipped}


def _load_prepared_dir(path) -> dict:
    from .preprocess import load_prepared

    dirs = sorted(p.parent for p in Path(path).glob("*/prepared.json"))
    if not dirs:
        raise ConfigError(f"no prepared sessions under {path}")
    sessions = {}
    for d in dirs:
        p = load_prepared(d)
        sessions[p.participant_id] = p
    return sessions


def _configs(args, cfg, T: Optional[int] = None):
    from .model import ModelConfig
    from .training import TrainConfig

    mvals = dict(cfg.get("model", {}))
    tvals = dict(cfg.get("train", {}))
    if T is not None:
        mvals["T"] = T
    if args.target is not None:
        tvals["target_kind"] = args.target
    if args.seed is not None:
        tvals["seeds"] = [args.seed]
    if args.epochs is not None:
        tvals["epochs"] = args.epochs
    return _build(ModelConfig, mvals), _build(TrainConfig, tvals)


def _train_one(sessions, model_cfg, train_cfg, out: Path, workers: int):
    from .training import run_experiment

    out.mkdir(parents=True, exist_ok=True)
    table = run_experiment(sessions, model_cfg, train_cfg, out, workers=workers)
    table.to_csv(out / "results.csv")
    (out / "summary.md").write_text(table.to_markdown())
    return table


def cmd_train(args, cfg) -> dict:
    sessions = _load_prepared_dir(args.prepared)
    Ts = _parse_T(args.T)
    if len(Ts) > 1:
        raise ConfigError("train takes a single --T; use sweep for several")
    model_cfg, train_cfg = _configs(args, cfg, Ts[0] if Ts else None)
    table = _train_one(sessions, model_cfg, train_cfg, Path(args.out), args.workers)
    print(table.to_markdown(), end="")
    return {"model": model_cfg.to_dict(), "train": dataclasses.asdict(train_cfg),
            "prepared": str(args.prepared)}


def _parse_T(value) -> list[int]:
    if value is None:
        return []
    try:
        Ts = [int(v) for v in str(value).split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"--T expects comma-separated integers, got {value!r}") from exc
    if len(set(Ts)) != len(Ts):
        raise ConfigError(f"duplicate window sizes in {value!r}")
    return Ts


def cmd_sweep(args, cfg) -> dict:
    from .training import table_markdown

    sessions = _load_prepared_dir(args.prepared)
    Ts = _parse_T(args.T) or [256, 384, 512, 768, 1024]
    out = Path(args.out)
    entries, configs, ckpt_dirs = [], {}, set()
    for T in Ts:
        model_cfg, train_cfg = _configs(args, cfg, T)
        sub = out / f"T{T}"
        ckpt = (sub / "checkpoints").resolve()
        if ckpt in ckpt_dirs:
            raise ConfigError(f"checkpoint directory {ckpt} reused across window sizes")
        ckpt_dirs.add(ckpt)
        table = _train_one(sessions, model_cfg, train_cfg, sub, args.workers)
        entries.append(("Ours", T, table.summary()))
        configs[str(T)] = model_cfg.to_dict()
    md = table_markdown(entries)
    (out / "sweep.md").write_text(md)
    with open(out / "sweep.csv", "w") as fh:
        fh.write("T,rho_raw_mean,rho_raw_mean_sd,rho_tonic_mean,rho_tonic_mean_sd\n")
        for _, T, s in entries:
            fh.write(f"{T},{s['rho_raw']['mean']!r},{s['rho_raw']['mean_sd']!r},"
                     f"{s['rho_tonic']['mean']!r},{s['rho_tonic']['mean_sd']!r}\n")
    print(md, end="")
    return {"T": Ts, "models": configs, "train": dataclasses.asdict(train_cfg),
            "prepared": str(args.prepared)}


def cmd_evaluate(args, cfg) -> dict:
    from .evaluation import evaluate_participant, plot_prediction, write_eval_csv

    sessions = _load_prepared_dir(args.prepared)
    run = Path(args.run)
    pred_files = sorted((run / "predictions").glob("T*_seed*_*.npy"))
    if not pred_files:
        raise ConfigError(f"no predictions under {run / 'predictions'}")
    target = args.target or "tonic"
    out = Path(args.out)
    (out / "plots").mkdir(parents=True, exist_ok=True)
    results = []
    for f in pred_files:
        t_part, seed_part, pid = f.stem.split("_", 2)
        T = int(t_part[1:])
        preds = np.load(f)
        res = evaluate_participant(preds, sessions[pid], target, T, motion=args.motion)
        results.append(res)
        plot_prediction(preds, sessions[pid], out / "plots" / f"{f.stem}.png",
                        f"{pid} ({seed_part}, T={T})")
    write_eval_csv(results, out / "eval.csv")
    return {"run": str(run), "prepared": str(args.prepared), "target": target, "motion": args.motion}


def cmd_stress(args, cfg) -> dict:
    from .dataset import list_sessions, load_session
    from .model import load_checkpoint
    from .stress import GBParams, build_features, run_stress, trend_series, window_session, write_report

    params = _build(GBParams, dict(cfg.get("stress", {})))
    sessions = [load_session(p) for p in list_sessions(args.data)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    windows = [w for s in sessions for w in window_session(s)]
    feature_sets = {"contact": build_features(windows, "contact")}
    feature_sets["contact"].to_csv(out / "features_contact.csv")
    modes = ("ppg_only", "eda_only", "both")
    if args.checkpoints:
        # camera arousal from each participant's held-out fold model; pulse stays contact
        from .training import predict_full

        prepared = _load_prepared_dir(args.prepared)
        cam_windows = []
        for s in sessions:
            if s.participant_id not in prepared:
                continue
            ckpt = Path(args.checkpoints) / f"fold_{s.participant_id}.pt"
            model, _ = load_checkpoint(ckpt)
            p = prepared[s.participant_id]
            arousal = trend_series(predict_full(model, p.frames, model.config.T), p.fs)
            cam_windows += window_session(s, eda=arousal)
        feature_sets["camera"] = build_features(cam_windows, "camera")
        feature_sets["camera"].to_csv(out / "features_camera.csv")
    results = run_stress(feature_sets, modes, params)
    path = write_report(results, out)
    print(path.read_text(), end="")
    return {"stress": dataclasses.asdict(params), "data": str(args.data),
            "checkpoints": args.checkpoints}


def cmd_report(args, cfg) -> dict:
    import csv

    from .training import aggregate, table_markdown

    entries = []
    for path in sorted(Path(args.run).rglob("results.csv")):
        with open(path, newline="") as fh:
            rows = [r for r in csv.DictReader(fh) if r["status"] == "ok"]
        for r in rows:
            r["seed"] = int(r["seed"])
            r["rho_raw"] = float(r["rho_raw"])
            r["rho_tonic"] = float(r["rho_tonic"])
        T = path.parent.name[1:] if path.parent.name.startswith("T") else None
        entries.append(("Ours", int(T) if T and T.isdigit() else None,
                        {k: aggregate(rows, k) for k in ("rho_raw", "rho_tonic")}))
    if not entries:
        raise ConfigError(f"no results.csv under {args.run}")
    md = table_markdown(entries)
    stress_md = Path(args.run) / "stress_results.md"
    if stress_md.exists():
        md += "\n" + stress_md.read_text()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.md").write_text(md)
    print(md, end="")
    return {"run": str(args.run)}


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "stress": cmd_stress,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with synth/preprocess/model/train/stress sections")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="random seed (training: single seed override)")
    common.add_argument("--workers", type=int, default=1, help="parallel fold/seed jobs")
    common.add_argument("--target", choices=("raw", "tonic"), help="label signal")
    common.add_argument("--T", help="window length in frames (comma list for sweep)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sympcam", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", parents=[common], help="generate synthetic sessions")
    p.add_argument("--participants", type=int)
    p.add_argument("--duration", type=float, help="session length in seconds")

    p = sub.add_parser("preprocess", parents=[common], help="crop, decimate and decompose sessions")
    p.add_argument("data", help="directory of session folders")
    p.add_argument("--size", type=int)
    p.add_argument("--fs-out", dest="fs_out", type=float)
    p.add_argument("--fallback-box", dest="fallback_box", choices=("full",),
                   help="crop box when no face is detected")

    for name, text in (("train", "LOSO training at one window size"),
                       ("sweep", "LOSO training over several window sizes")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("prepared", help="directory written by preprocess")
        p.add_argument("--epochs", type=int)

    p = sub.add_parser("evaluate", parents=[common], help="score saved predictions, plot, motion probe")
    p.add_argument("run", help="output directory of train")
    p.add_argument("prepared")
    p.add_argument("--motion", action="store_true", help="also correlate with optical flow")

    p = sub.add_parser("stress", parents=[common], help="stress classification under LOSO")
    p.add_argument("data", help="directory of session folders")
    p.add_argument("--checkpoints", help="fold checkpoints (seed directory) for camera arousal")
    p.add_argument("--prepared", help="prepared sessions matching --checkpoints")

    p = sub.add_parser("report", parents=[common], help="collect results into Markdown tables")
    p.add_argument("run", help="directory searched for results.csv")
    return parser


def _fail(code: int, exc: BaseException) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
    return code


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    needs_out = args.command in ("synth", "train", "sweep", "evaluate", "stress", "report")
    try:
        if needs_out and not args.out:
            raise ConfigError(f"{args.command} requires --out")
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        if args.command == "stress" and bool(args.checkpoints) != bool(args.prepared):
            raise ConfigError("--checkpoints and --prepared go together")
        cfg = load_config(args.config)
        resolved = COMMANDS[args.command](args, cfg)
        seed = args.seed if args.seed is not None else resolved.get("synth", {}).get("seed")
        write_manifest(Path(args.out), args.command, resolved, seed)
    except ConfigError as exc:
        return _fail(2, exc)
    except Exception as exc:  # noqa: BLE001 - reported as one JSON line
        logger.debug("failure", exc_info=True)
        return _fail(1, exc)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
