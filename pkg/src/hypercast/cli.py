"""``hypercast`` command line: synth, prepare, hypergraph, train, forecast, evaluate, inspect.

Every subcommand reads one config file (``--config``) plus ``--set key=value``
overrides, writes the resolved config and a manifest into the output directory,
and on failure prints one JSON line to stderr and exits 1 (usage), 2 (data) or
3 (numeric).
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .config import ConfigError, RunConfig
from .data import (
    DataError,
    build_windows,
    chronological_split,
    impute_missing,
    ingest_sessions,
    read_panel,
    read_sessions_csv,
    read_stations_csv,
    stack_samples,
    synthetic_panel,
    write_panel,
)
from .hypergraph import HypergraphError, demand_hypergraph, fcm_soft_clusters
from .introspect import IntrospectionError, build_report, write_report
from .model import AttentionTrace, ConfigMismatchError, HyperCast
from .train import (
    TrainingError,
    batch_hypergraphs,
    evaluate,
    persistence_forecast,
    predict,
    regression_metrics,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("hypercast")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# shared plumbing


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _start(cfg: RunConfig, command: str) -> Path:
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.resolved.json", cfg.resolved())
    return out


def _manifest(cfg: RunConfig, command: str, outputs: list[Path]) -> Path:
    manifest = {
        "command": command,
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "config": cfg.resolved(),
        "outputs": sorted(str(p) for p in outputs),
        "versions": {
            "hypercast": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }
    return _write_json(cfg.output_dir / f"manifest.{command}.json", manifest)


def _load_panel(cfg: RunConfig):
    path = cfg.panel_csv
    if not path.exists():
        raise DataError(f"panel {path} not found (run synth or prepare first)")
    return read_panel(path)


def _split(cfg: RunConfig, panel):
    m = cfg.model_config(panel.n_stations)
    samples = build_windows(panel, m.T_r, m.T_w, m.T_f)
    train_s, test_s = chronological_split(samples, cfg["data"]["split_ratio"])
    if not train_s or not test_s:
        raise DataError(f"split of {len(samples)} windows leaves an empty train or test set")
    return m, train_s, test_s


def _distance_hypergraph(cfg: RunConfig, panel, K: int):
    hg = cfg["hypergraph"]
    return fcm_soft_clusters(
        panel.coords, K, m=hg["fcm_m"], tol=hg["fcm_tol"], max_iter=hg["fcm_max_iter"], seed=cfg.seed
    )


def _load_model(cfg: RunConfig, panel) -> HyperCast:
    path = cfg.checkpoint
    if not path.exists():
        raise DataError(f"checkpoint {path} not found (run train first)")
    return HyperCast.load(path, expected=cfg.model_config(panel.n_stations))


def write_incidence(path: Path, H: np.ndarray, station_ids, meta: dict) -> Path:
    """``# {json}`` header, then one row per station, one column per hyperedge."""
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["station_id", *(f"e{k}" for k in range(H.shape[1]))])
        for sid, row in zip(station_ids, H):
            w.writerow([sid, *(repr(float(v)) for v in row)])
    return path


def write_forecast(path: Path, samples, pred: np.ndarray, panel) -> Path:
    T_f = pred.shape[-1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["anchor_date", "station_id", *(f"h{i + 1}" for i in range(T_f))])
        for s, yhat in zip(samples, pred):
            day = panel.dates[s.anchor_day].isoformat()
            for sid, row in zip(panel.station_ids, yhat):
                w.writerow([day, sid, *(repr(float(v)) for v in row)])
    return path


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg: RunConfig) -> list[Path]:
    s = cfg["synth"]
    panel = synthetic_panel(cfg.seed, int(s["N_s"]), int(s["T"]), float(s["noise_sigma"]),
                            amplitude=float(s["amplitude"]))
    path = cfg.panel_csv
    path.parent.mkdir(parents=True, exist_ok=True)
    return [path, write_panel(panel, path)]


def cmd_prepare(cfg: RunConfig) -> list[Path]:
    d = cfg["data"]
    if not d["sessions_csv"] or not d["stations_csv"]:
        raise ConfigError("prepare needs data.sessions_csv and data.stations_csv")
    panel, rejected = ingest_sessions(read_sessions_csv(d["sessions_csv"]), read_stations_csv(d["stations_csv"]))
    if d["impute_empty_days"]:
        empty = panel.demand.sum(axis=0) == 0
        if empty.any() and not empty.all():
            panel = impute_missing(panel, np.broadcast_to(empty, panel.demand.shape))
    path = cfg.panel_csv
    path.parent.mkdir(parents=True, exist_ok=True)
    outputs = [path, write_panel(panel, path)]
    rej = cfg.output_dir / "rejected_sessions.csv"
    with open(rej, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["station_id", "start_iso8601", "energy_kwh"])
        for r in rejected:
            w.writerow([r.station_id, r.start.isoformat(), repr(r.energy)])
    if rejected:
        log.warning("%d sessions reference unknown stations", len(rejected))
    return outputs + [rej]


def cmd_hypergraph(cfg: RunConfig) -> list[Path]:
    panel = _load_panel(cfg)
    m = cfg.model_config(panel.n_stations)
    out = cfg.output_dir
    H = _distance_hypergraph(cfg, panel, m.K)
    outputs = [write_incidence(out / "incidence_distance.csv", H.values, panel.station_ids,
                               {"view": H.view, "timescale": H.timescale, **H.params})]
    samples = build_windows(panel, m.T_r, m.T_w, m.T_f)
    if not samples:
        raise DataError("panel too short for any window")
    s = samples[int(cfg["hypergraph"]["anchor"])]
    day = panel.dates[s.anchor_day].isoformat()
    for name, window in (("recent", s.recent[:, :, 0]), ("weekly", s.weekly[:, :, 0])):
        Hd = demand_hypergraph(window, m.K, name)
        outputs.append(write_incidence(out / f"incidence_demand_{name}.csv", Hd.values, panel.station_ids,
                                       {"view": Hd.view, "timescale": name, "anchor_date": day}))
    return outputs


def _train_one(cfg: RunConfig, panel, out: Path) -> list[Path]:
    m, train_s, _ = _split(cfg, panel)
    tcfg = cfg.train_config()
    model = HyperCast(m, seed=cfg.seed, H_dist=_distance_hypergraph(cfg, panel, m.K).values)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out / "checkpoints" if tcfg.checkpoint_every else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(exist_ok=True)
    model, tlog = train(model, train_s, tcfg, checkpoint_dir=ckpt_dir)
    ckpt = out / cfg.checkpoint.name if cfg["checkpoint"] is None else cfg.checkpoint
    model.save(ckpt)
    log_path = out / "trainlog.csv"
    tlog.to_csv(log_path)
    return [ckpt, ckpt.with_name(ckpt.name + ".json"), log_path]


def cmd_train(cfg: RunConfig) -> list[Path]:
    panel = _load_panel(cfg)
    grid = cfg["grid"]
    if not grid:
        return _train_one(cfg, panel, cfg.output_dir)
    outputs, rows = [], []
    keys = sorted(grid)
    for values in itertools.product(*(grid[k] for k in keys)):
        cell = dict(zip(keys, values))
        name = "_".join(f"{k}{v}" for k, v in cell.items())
        sub = cfg.with_model(**cell)
        sub.raw["output_dir"] = str(cfg.output_dir / name)
        sub.raw["checkpoint"] = None
        sub.raw["grid"] = None
        sub.validate()
        log.info("grid cell %s", name)
        outputs += _train_one(sub, panel, sub.output_dir)
        model = HyperCast.load(sub.checkpoint)
        _, _, test_s = _split(sub, panel)
        rows.append({"cell": name, **cell, **evaluate(model, test_s)})
    summary = cfg.output_dir / "grid_metrics.json"
    outputs.append(_write_json(summary, rows))
    return outputs


def cmd_forecast(cfg: RunConfig) -> list[Path]:
    panel = _load_panel(cfg)
    model = _load_model(cfg, panel)
    _, _, test_s = _split(cfg, panel)
    pred = predict(model, test_s)
    return [write_forecast(cfg.output_dir / "forecast.csv", test_s, pred, panel)]


def cmd_evaluate(cfg: RunConfig) -> list[Path]:
    panel = _load_panel(cfg)
    model = _load_model(cfg, panel)
    _, _, test_s = _split(cfg, panel)
    Y = np.stack([s.target for s in test_s])
    metrics = {
        "model": evaluate(model, test_s),
        "persistence": regression_metrics(Y, persistence_forecast(test_s)),
        "n_test": len(test_s),
    }
    return [_write_json(cfg.output_dir / "metrics.json", metrics)]


def cmd_inspect(cfg: RunConfig) -> list[Path]:
    panel = _load_panel(cfg)
    model = _load_model(cfg, panel)
    _, _, test_s = _split(cfg, panel)
    H_rec, H_wek = batch_hypergraphs(test_s, model.cfg.K)
    X_rec, X_wek, _ = stack_samples(test_s)
    trace = AttentionTrace()
    model(X_rec, X_wek, H_rec, H_wek, trace=trace)
    report = build_report(trace, X_rec, X_wek, model.H_dist, H_rec, H_wek, panel, panel.coords)
    return write_report(report, cfg.output_dir / "introspection")


COMMANDS = {
    "synth": (cmd_synth, "generate a seeded synthetic demand panel"),
    "prepare": (cmd_prepare, "aggregate session and station CSVs into a daily panel"),
    "hypergraph": (cmd_hypergraph, "write distance and demand incidence matrices"),
    "train": (cmd_train, "train a model (or every cell of the grid stanza)"),
    "forecast": (cmd_forecast, "forecast every test window"),
    "evaluate": (cmd_evaluate, "MSE/MAE/R2 on the test split, with a persistence baseline"),
    "inspect": (cmd_inspect, "attention introspection bundle for the test split"),
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hypercast", description="Hypergraph EV charging demand forecasting.")
    p.add_argument("--version", action="version", version=f"hypercast {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", "-c", help="YAML or JSON run config")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. model.d_h=16 (repeatable)")
        sp.add_argument("--output-dir", "-o", help="shorthand for --set output_dir=...")
        sp.add_argument("--verbose", "-v", action="store_true")
    return p


def _fail(code: int, kind: str, message: str, **extra) -> int:
    payload = {"error": kind, "message": message, "exit_code": code, **extra}
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides)
    if args.output_dir:
        overrides.append(f"output_dir={args.output_dir}")
    try:
        cfg = RunConfig.load(args.config, overrides)
        _start(cfg, args.command)
        outputs = COMMANDS[args.command][0](cfg)
        _manifest(cfg, args.command, outputs)
    except ConfigMismatchError as exc:
        return _fail(EXIT_DATA, "config_mismatch", str(exc), field=exc.field)
    except (ConfigError, UsageError) as exc:
        return _fail(EXIT_USAGE, "config", str(exc))
    except FileNotFoundError as exc:
        return _fail(EXIT_DATA, "data", f"file not found: {exc.filename}")
    except (TrainingError, ad.NonFiniteError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return _fail(EXIT_NUMERIC, "numeric", str(exc))
    except (DataError, HypergraphError, IntrospectionError, ad.ShapeError, ValueError, KeyError) as exc:
        return _fail(EXIT_DATA, "data", str(exc))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
