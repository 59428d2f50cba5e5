"""Command-line entry point: train, eval, predict, ablate, synth, gradcheck, export-adj.

Exit codes: 0 success, 1 usage or configuration error, 2 training divergence.
Every command writes under ``--out`` with fixed file names.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from . import __version__
from .data import (
    NormStats,
    SignalStore,
    SyntheticSpec,
    WindowedDataset,
    denormalize,
    export_synthetic,
    generate_synthetic,
    load_signals,
    make_windows,
    normalize,
)
from .errors import ConfigError, DivergenceError, GwnetError
from .graph import Graph, export_heatmap, load_graph
from .layers import AdjacencyMode
from .model import MODEL_KEYS, GraphWaveNet, ModelConfig, build, load, parse_kv, read_kv_file
from .tensor import Op, Tensor, corrupted_backward, no_grad
from .train import MetricReport, TrainOptions, evaluate, train_loop

logger = logging.getLogger("gwnet")

MANIFEST = "manifest.txt"
TRAIN_LOG = "train_log.csv"
TIMING = "timing.csv"
CHECKPOINT = "best.ckpt"
METRICS = "metrics.csv"
ADJ = "adj.csv"
ABLATION = "ablation.csv"
PREDICTIONS = "predictions.csv"
SERIES = "series.csv"
GRAPH = "graph.csv"

TRAIN_KEYS = {"lr": float, "batch_size": int, "epochs": int, "patience": int, "clip": float}
DATA_KEYS = {"data": str, "graph": str, "graph_kind": str, "sigma": float, "kappa": float,
             "ratios": str, "data_format": str}
SYNTH_KEYS = {"nodes": int, "steps": int, "noise_std": float, "edge_prob": float}
# written into manifests; accepted on read so a manifest can be replayed with --config
META_KEYS = {"command", "version", "out"}

ABLATION_MODES = [m.value for m in (AdjacencyMode.IDENTITY, AdjacencyMode.FORWARD,
                                    AdjacencyMode.ADAPTIVE, AdjacencyMode.FORWARD_BACKWARD,
                                    AdjacencyMode.FORWARD_BACKWARD_ADAPTIVE)]


def artifact_version() -> str:
    """Package version plus a short hash of the installed sources, git-describe style."""
    h = hashlib.sha1()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return f"{__version__}+g{h.hexdigest()[:10]}"


# --- settings ----------------------------------------------------------------

@dataclass
class RunSettings:
    """Everything a command needs, resolved from defaults, ``--config`` and flags."""

    values: dict[str, str] = field(default_factory=dict)

    def get(self, key: str, default=None):
        raw = self.values.get(key)
        if raw is None or raw == "":
            return default
        typ = {**TRAIN_KEYS, **DATA_KEYS, **SYNTH_KEYS}.get(key, str)
        try:
            return typ(raw)
        except ValueError:
            raise ConfigError(f"bad value {raw!r} for {key}", key=key) from None

    @property
    def seed(self) -> int:
        try:
            return int(self.values.get("seed", "0"))
        except ValueError:
            raise ConfigError(f"bad value {self.values['seed']!r} for seed", key="seed") from None

    def model_values(self) -> dict[str, str]:
        return {k: v for k, v in self.values.items() if k in MODEL_KEYS}

    def train_options(self) -> TrainOptions:
        opts = TrainOptions(seed=self.seed)
        for key in TRAIN_KEYS:
            val = self.get(key)
            if val is not None:
                opts = replace(opts, **{key: val})
        if opts.lr < 0 or opts.batch_size < 1 or opts.epochs < 1 or opts.patience < 0:
            raise ConfigError("training options out of range (lr >= 0, batch_size >= 1, "
                              "epochs >= 1, patience >= 0)", key="lr")
        return opts

    def ratios(self) -> tuple[float, float, float]:
        raw = self.values.get("ratios", "0.7,0.1,0.2")
        try:
            parts = tuple(float(x) for x in raw.split(","))
        except ValueError:
            raise ConfigError(f"bad ratios {raw!r}", key="ratios") from None
        if len(parts) != 3:
            raise ConfigError(f"ratios needs three numbers, got {raw!r}", key="ratios")
        return parts

    def record(self, cfg: ModelConfig | None = None, opts: TrainOptions | None = None) -> None:
        """Fold resolved defaults back in so the manifest reproduces the run on its own."""
        if cfg is not None:
            self.values.update(parse_kv(cfg.to_text()))
        if opts is not None:
            for key in TRAIN_KEYS:
                self.values[key] = str(getattr(opts, key))
        self.values["ratios"] = ",".join(str(r) for r in self.ratios())

    def to_text(self, command: str, out: Path) -> str:
        lines = ["# gwnet run manifest", f"command = {command}",
                 f"version = {artifact_version()}", f"out = {out}"]
        lines += [f"{k} = {v}" for k, v in sorted(self.values.items()) if k not in META_KEYS]
        return "\n".join(lines) + "\n"


KNOWN_KEYS = MODEL_KEYS | set(TRAIN_KEYS) | set(DATA_KEYS) | set(SYNTH_KEYS) | META_KEYS


def resolve_settings(args: argparse.Namespace) -> RunSettings:
    values: dict[str, str] = {}
    if args.config:
        values.update(read_kv_file(args.config))
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}", key=item)
        key, val = item.split("=", 1)
        values[key.strip()] = val.strip()
    flag_map = {"data": "data", "graph": "graph", "seed": "seed", "epochs": "epochs",
                "lr": "lr", "batch_size": "batch_size", "patience": "patience",
                "mode": "adjacency_mode", "graph_kind": "graph_kind"}
    for attr, key in flag_map.items():
        val = getattr(args, attr, None)
        if val is not None:
            values[key] = str(val)
    for key in values:
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown configuration key {key!r}", key=key)
    for key in ("data", "graph"):
        if values.get(key):
            values[key] = os.path.abspath(values[key])
    return RunSettings(values)


def out_dir(args: argparse.Namespace, settings: RunSettings) -> Path:
    out = args.out or settings.values.get("out") or "."
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


# --- shared steps --------------------------------------------------------------

def load_inputs(settings: RunSettings) -> tuple[SignalStore, Graph | None]:
    data = settings.get("data")
    if not data:
        raise ConfigError("no data file given (--data or 'data = ...' in --config)", key="data")
    store = load_signals(data, settings.get("data_format"))
    graph = None
    if settings.get("graph"):
        graph = load_graph(settings.get("graph"), settings.get("graph_kind", "adjacency"),
                           settings.get("sigma"), settings.get("kappa", 0.1))
    return store, graph


def model_config(settings: RunSettings, store: SignalStore, **overrides) -> ModelConfig:
    values = settings.model_values()
    values.setdefault("num_nodes", str(store.num_nodes))
    values.setdefault("input_dim", str(store.num_features))
    values.setdefault("output_dim", str(store.num_features))
    values["seed"] = str(settings.seed)
    values.update({k: str(v) for k, v in overrides.items()})
    cfg = ModelConfig.from_dict(values)
    if cfg.num_nodes != store.num_nodes:
        raise ConfigError(f"config says {cfg.num_nodes} nodes, data has {store.num_nodes}",
                          key="num_nodes")
    if cfg.input_dim != store.num_features or cfg.output_dim != store.num_features:
        raise ConfigError(f"data has {store.num_features} features per node; input_dim and "
                          f"output_dim must match", key="input_dim")
    return cfg


def train_one(cfg: ModelConfig, graph: Graph | None, ds: WindowedDataset, opts: TrainOptions,
              out: Path | None) -> tuple[GraphWaveNet, float]:
    model = build(cfg, graph)
    logger.info("model %s: %d parameters", cfg.adjacency_mode, model.num_parameters())
    res = train_loop(model, ds, opts,
                     log_path=None if out is None else out / TRAIN_LOG,
                     timing_path=None if out is None else out / TIMING)
    if out is not None:
        (out / CHECKPOINT).write_bytes(res.best_checkpoint)
    return model, res.best_score


def eval_split(ds: WindowedDataset) -> str:
    for name in ("test", "val", "train"):
        if not ds.split(name).empty:
            return name
    raise ConfigError("no split has any samples", key="ratios")


def format_table(rows: Sequence[tuple[str, float, float, float]], first: str) -> str:
    lines = [f"{first:>26s} {'MAE':>10s} {'RMSE':>10s} {'MAPE%':>10s}"]
    lines += [f"{name:>26s} {mae:10.4f} {rmse:10.4f} {mape:10.4f}"
              for name, mae, rmse, mape in rows]
    return "\n".join(lines)


# --- commands -------------------------------------------------------------------

def cmd_train(args) -> int:
    settings = resolve_settings(args)
    store, graph = load_inputs(settings)
    cfg = model_config(settings, store)
    opts = settings.train_options()
    ds = make_windows(store, cfg.input_window, cfg.horizon, settings.ratios())
    out = out_dir(args, settings)
    settings.record(cfg, opts)
    (out / MANIFEST).write_text(settings.to_text("train", out.resolve()), encoding="utf-8")
    model, best = train_one(cfg, graph, ds, opts, out)
    print(f"trained {cfg.adjacency_mode} model ({model.num_parameters()} parameters); "
          f"best selection MAE {best:.6f}; artifacts in {out}")
    return 0


def cmd_eval(args) -> int:
    settings = resolve_settings(args)
    model = load(args.checkpoint)
    store, _ = load_inputs(settings)
    cfg = model.config
    if store.num_nodes != cfg.num_nodes:
        raise ConfigError(f"checkpoint expects {cfg.num_nodes} nodes, data has {store.num_nodes}",
                          key="num_nodes")
    norm = None
    if model.norm_mean is not None:
        norm = NormStats(model.norm_mean, model.norm_std)
    ds = make_windows(store, cfg.input_window, cfg.horizon, settings.ratios(), norm=norm)
    split = args.split or eval_split(ds)
    if ds.split(split).empty:
        raise ConfigError(f"{split} split has no samples", key="ratios")
    _, rep = evaluate(model, ds.split(split), ds.norm)
    horizons = parse_horizons(args.horizons, cfg.horizon)
    rows = [(str(h), rep.mae[h - 1], rep.rmse[h - 1], rep.mape[h - 1]) for h in horizons]
    rows.append(("mean", rep.mean_mae, rep.mean_rmse, rep.mean_mape))
    out = out_dir(args, settings)
    with open(out / METRICS, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("horizon", "mae", "rmse", "mape", "count"))
        counts = [int(rep.counts[h - 1]) for h in horizons] + [int(rep.counts.sum())]
        for (name, mae, rmse, mape), n in zip(rows, counts):
            w.writerow((name, repr(float(mae)), repr(float(rmse)), repr(float(mape)), n))
    print(f"{split} split, {len(ds.split(split))} samples")
    print(format_table(rows, "horizon"))
    return 0


def parse_horizons(text: str | None, horizon: int) -> list[int]:
    if not text:
        return list(range(1, horizon + 1))
    try:
        hs = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad --horizons {text!r}", key="horizons") from None
    bad = [h for h in hs if not 1 <= h <= horizon]
    if bad or not hs:
        raise ConfigError(f"horizons must lie in 1..{horizon}, got {text!r}", key="horizons")
    return hs


def cmd_predict(args) -> int:
    settings = resolve_settings(args)
    model = load(args.checkpoint)
    store, _ = load_inputs(settings)
    cfg = model.config
    if store.num_nodes != cfg.num_nodes:
        raise ConfigError(f"checkpoint expects {cfg.num_nodes} nodes, data has {store.num_nodes}",
                          key="num_nodes")
    if model.norm_mean is None:
        raise ConfigError("checkpoint carries no normalisation statistics", key="norm_mean")
    norm = NormStats(model.norm_mean, model.norm_std)
    s = cfg.input_window
    if store.num_steps < s:
        raise ConfigError(f"need at least {s} steps of history, data has {store.num_steps}",
                          key="input_window")
    window = normalize(store.values[-s:], norm)  # [S, N, D]
    with no_grad():
        pred = model.forward(Tensor(window.transpose(2, 1, 0)[None])).data[0]
    pred = denormalize(pred, norm)  # [T, N, D]
    out = out_dir(args, settings)
    names = store.node_ids if cfg.output_dim == 1 else [
        f"{n}:{d}" for n in store.node_ids for d in range(cfg.output_dim)]
    with open(out / PREDICTIONS, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", *names])
        for t, row in enumerate(pred.reshape(cfg.horizon, -1), 1):
            w.writerow([t, *(repr(float(v)) for v in row)])
    print(f"wrote {cfg.horizon}-step forecast for {cfg.num_nodes} nodes to {out / PREDICTIONS}")
    return 0


def run_ablation(store: SignalStore, graph: Graph | None, settings: RunSettings,
                 out: Path | None = None) -> list[tuple[str, MetricReport]]:
    """Train one model per adjacency mode under a shared seed; graph modes need ``graph``."""
    opts = settings.train_options()
    results = []
    for mode in ABLATION_MODES:
        if AdjacencyMode(mode).needs_graph and graph is None:
            print(f"skipping {mode}: no graph supplied", file=sys.stderr)
            continue
        cfg = model_config(settings, store, adjacency_mode=mode)
        ds = make_windows(store, cfg.input_window, cfg.horizon, settings.ratios())
        sub = None
        if out is not None:
            sub = out / mode
            sub.mkdir(exist_ok=True)
        model, _ = train_one(cfg, graph, ds, opts, sub)
        _, rep = evaluate(model, ds.split(eval_split(ds)), ds.norm)
        results.append((mode, rep))
    return results


def cmd_ablate(args) -> int:
    settings = resolve_settings(args)
    store, graph = load_inputs(settings)
    out = out_dir(args, settings)
    settings.record(opts=settings.train_options())
    (out / MANIFEST).write_text(settings.to_text("ablate", out.resolve()), encoding="utf-8")
    results = run_ablation(store, graph, settings, out)
    with open(out / ABLATION, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("mode", "mae", "rmse", "mape"))
        for mode, rep in results:
            w.writerow((mode, repr(rep.mean_mae), repr(rep.mean_rmse), repr(rep.mean_mape)))
    print(format_table([(m, r.mean_mae, r.mean_rmse, r.mean_mape) for m, r in results], "mode"))
    return 0


def cmd_synth(args) -> int:
    settings = resolve_settings(args)
    spec = SyntheticSpec(n=settings.get("nodes", 10), edge_prob=settings.get("edge_prob", 0.2),
                         noise_std=settings.get("noise_std", 0.01),
                         steps=settings.get("steps", 2000), seed=settings.seed)
    store, graph = generate_synthetic(spec)
    out = out_dir(args, settings)
    export_synthetic(store, graph, out / SERIES, out / GRAPH)
    (out / MANIFEST).write_text(settings.to_text("synth", out.resolve()), encoding="utf-8")
    print(f"wrote {spec.steps} steps on {spec.n} nodes ({graph.num_edges} edges) to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_suite

    if args.corrupt:
        try:
            op = Op[args.corrupt.upper()]
        except KeyError:
            raise ConfigError(f"unknown op {args.corrupt!r}", key="corrupt") from None
        with corrupted_backward(op):
            results = run_suite(args.seed or 0)
    else:
        results = run_suite(args.seed or 0)
    failed = 0
    for name, err in results:
        ok = err < TOLERANCE
        failed += not ok
        print(f"{name:32s} {err:.3e} {'ok' if ok else 'FAIL'}")
    print(f"{len(results) - failed}/{len(results)} passed (tolerance {TOLERANCE:g})")
    return 0 if failed == 0 else 1


def cmd_export_adj(args) -> int:
    model = load(args.checkpoint)
    if model.embeddings is None:
        raise ConfigError(f"checkpoint uses adjacency_mode {model.config.adjacency_mode}, which "
                          "has no learned adjacency to export", key="adjacency_mode")
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    with no_grad():
        adj = model.adaptive_matrix().data
    export_heatmap(adj, out / ADJ)
    msg = f"wrote {adj.shape[0]}x{adj.shape[1]} adaptive adjacency to {out / ADJ}"
    if args.top_nodes:
        k = args.top_nodes
        if not 1 <= k <= adj.shape[0]:
            raise ConfigError(f"--top-nodes must lie in 1..{adj.shape[0]}", key="top_nodes")
        export_heatmap(adj, out / f"adj_top{k}.csv", top_nodes=k)
        msg += f" and leading {k}x{k} block to {out / f'adj_top{k}.csv'}"
    print(msg)
    return 0


# --- parser ------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gwnet", description="Graph WaveNet forecasting from the command line.")
    parser.add_argument("--version", action="version", version=f"gwnet {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    # -v is accepted after the subcommand too; SUPPRESS keeps it from resetting the top-level flag
    verbose = _Parser(add_help=False)
    verbose.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    def common(p, data=True):
        p.add_argument("--config", help="key = value file (a manifest.txt also works)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any config key; repeatable")
        if data:
            p.add_argument("--data", help="signal file (csv-wide or raw-binary)")
            p.add_argument("--graph", help="adjacency (or distance) CSV")
            p.add_argument("--graph-kind", choices=("adjacency", "distance"))

    def training(p):
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--patience", type=int)

    p = sub.add_parser("train", parents=[verbose], help="train a model")
    common(p)
    training(p)
    p.add_argument("--mode", choices=ABLATION_MODES, help="adjacency mode")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[verbose], help="per-horizon metrics of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--horizons", help="comma-separated 1-based steps, e.g. 3,6,12")
    p.add_argument("--split", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[verbose],
                       help="forecast the horizon after the last input window")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", parents=[verbose], help="train every adjacency mode and compare")
    common(p)
    training(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("synth", parents=[verbose], help="generate a synthetic diffusion dataset")
    common(p, data=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", parents=[verbose],
                       help="finite-difference check of every op and layer")
    p.add_argument("--seed", type=int)
    p.add_argument("--corrupt", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-adj", parents=[verbose],
                       help="write the learned adaptive adjacency as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p.add_argument("--top-nodes", type=int, help="also write the leading k x k block")
    p.set_defaults(func=cmd_export_adj)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        key = f" [{exc.key}]" if exc.key else ""
        print(f"error{key}: {exc}", file=sys.stderr)
        return 1
    except (GwnetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
