"""Command-line pipeline: ingest, windows, cluster, train, predict, eval, inspect, plot.

Every stage reads and writes plain files. Each artifact carries a header
with the package version, the seed and a hash of the merged config, so
identical inputs and seed give byte-identical outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import __version__
from . import tensorcore as tc
from .dataio import DataError, Scene, filter_univ_n, make_windows, parse_dataset, read_windows, write_windows
from .evaluation import PROTOCOLS, emit_plots, evaluate, predict_all
from .grouping import GroupAssignment, cluster_tick, dice, load_annotations
from .model import Grouptron, ModelConfig, ModelStateError, featurize
from .stgraph import PerceptionConfig, build_group, build_individual, build_scene
from .trainer import TrainConfig, TrainingDiverged, train

log = logging.getLogger("grouptron")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
SCENES_FILE = "scenes.jsonl"
WINDOWS_FILE = "windows.jsonl"
CHECKPOINT_FILE = "checkpoint.bin"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; this pipeline reserves 2 for data errors
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------- config


@dataclass
class CliConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    out: Path = Path(".")
    jobs: int = 1

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict(), "seed": self.seed}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def header(self, command: str) -> dict:
        return {"tool": "grouptron", "version": __version__, "command": command,
                "seed": self.seed, "config_hash": self.digest()}


MODEL_FLAGS = ("scene_dim", "latent_k", "alpha", "beta", "radius", "sigma", "linkage")
TRAIN_FLAGS = ("epochs", "batch_size", "lr0", "decay", "clip", "clip_mode")


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise DataError(f"{path}: {err}") from None
    if not isinstance(data, dict):
        raise DataError(f"{path}: config must be a JSON object")
    return data


def resolve_config(args: argparse.Namespace) -> CliConfig:
    """Merge flags over the config file over built-in defaults."""
    file_cfg = _load_config_file(getattr(args, "config", None))
    model_d = dict(file_cfg.get("model", {}))
    train_d = dict(file_cfg.get("train", {}))
    if file_cfg.get("eth_config") or getattr(args, "eth_config", False):
        model_d["scene_dim"] = ModelConfig().with_eth().scene_dim
    for name in MODEL_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            model_d[name] = v
    for name in TRAIN_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            train_d[name] = v
    seed = args.seed if getattr(args, "seed", None) is not None else int(file_cfg.get("seed", 0))
    if seed < 0 or seed >= 2**64:
        raise UsageError("--seed must be an unsigned 64-bit integer")
    unknown = set(model_d) - {f.name for f in fields(ModelConfig)}
    unknown |= set(train_d) - {f.name for f in fields(TrainConfig)}
    if unknown:
        raise DataError(f"unknown config keys: {', '.join(sorted(unknown))}")
    train_d["seed"] = seed
    try:
        model = ModelConfig.from_dict(model_d)
        trn = TrainConfig(**train_d)
    except (TypeError, ValueError) as err:
        raise DataError(f"invalid config: {err}") from None
    jobs = getattr(args, "jobs", 1) or 1
    if jobs < 1:
        raise UsageError("--jobs must be >= 1")
    return CliConfig(model, trn, seed, Path(getattr(args, "out", ".") or "."), jobs)


# ---------------------------------------------------------------- file helpers


def _require(paths) -> None:
    for p in paths:
        if not Path(p).exists():
            raise UsageError(f"no such file: {p}")


def _write_jsonl(path: Path, header: dict, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"header": header}, sort_keys=True) + "\n")
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _write_json(path: Path, header: dict, body: dict) -> None:
    path.write_text(json.dumps({"header": header, **body}, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_scenes(path) -> list[Scene]:
    scenes = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            if "header" not in d:
                scenes.append(Scene.from_dict(d))
    return scenes


def _read_windows(paths) -> list:
    _require(paths)
    out = []
    for p in paths:
        out.extend(read_windows(p))
    return out


def save_checkpoint(path: Path, model: Grouptron, header: dict, cli: CliConfig) -> None:
    meta = json.dumps({"header": header, "model": model.cfg.to_dict(), "train": cli.train.to_dict()},
                      sort_keys=True).encode()
    tc.save_snapshot(path, model.parameters(), meta=meta)


def load_checkpoint(path) -> tuple[Grouptron, dict]:
    _require([path])
    arrays, meta = tc.load_snapshot(path)
    try:
        info = json.loads(meta.decode("utf-8")) if meta else {}
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise DataError(f"{path}: unreadable checkpoint metadata") from None
    cfg = ModelConfig.from_dict(info.get("model", {}))
    return Grouptron.from_arrays(cfg, arrays), info


def _featurize_all(windows, cfg: ModelConfig, jobs: int):
    if jobs <= 1 or len(windows) < 2:
        return [featurize(w, cfg) for w in windows]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        # map preserves input order, so results do not depend on scheduling
        return list(ex.map(featurize, windows, [cfg] * len(windows), chunksize=max(1, len(windows) // (4 * jobs))))


# worker state for parallel prediction
_WORKER_MODEL: Grouptron | None = None


def _init_worker(cfg_d: dict, arrays: dict) -> None:
    global _WORKER_MODEL
    _WORKER_MODEL = Grouptron.from_arrays(ModelConfig.from_dict(cfg_d), arrays)


def _predict_chunk(args):
    windows, k = args
    return predict_all(_WORKER_MODEL, windows, k)


def _predict(model: Grouptron, windows, k: int, jobs: int):
    if jobs <= 1 or len(windows) < 2:
        return predict_all(model, windows, k)
    arrays = {n: t.data for n, t in model.parameters().items()}
    step = -(-len(windows) // jobs)
    chunks = [(windows[i : i + step], k) for i in range(0, len(windows), step)]
    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker,
                             initargs=(model.cfg.to_dict(), arrays)) as ex:
        return [p for part in ex.map(_predict_chunk, chunks) for p in part]


# ---------------------------------------------------------------- commands


def cmd_ingest(args, cli: CliConfig) -> int:
    _require(args.files)
    scenes = []
    for f in args.files:
        p = Path(f)
        with open(p, encoding="utf-8", newline="") as fh:
            scenes.append(parse_dataset(fh, name=p.stem))
    names = [s.name for s in scenes]
    if len(set(names)) != len(names):
        raise DataError("input files must have distinct stems")
    cli.out.mkdir(parents=True, exist_ok=True)
    _write_jsonl(cli.out / SCENES_FILE, cli.header("ingest"), [s.to_dict() for s in scenes])
    for s in scenes:
        log.info("%s: %d pedestrians over %d ticks", s.name, len(s.tracks), s.n_ticks)
    return EXIT_OK


def cmd_windows(args, cli: CliConfig) -> int:
    _require([args.scenes])
    windows = [w for s in read_scenes(args.scenes) for w in make_windows(s)]
    if args.min_present is not None:
        if args.min_present < 1:
            raise UsageError("--min-present must be >= 1")
        windows = filter_univ_n(windows, args.min_present)
    cli.out.mkdir(parents=True, exist_ok=True)
    header = cli.header("windows") | {"min_present": args.min_present}
    write_windows(cli.out / WINDOWS_FILE, windows, header)
    log.info("%d windows", len(windows))
    return EXIT_OK


def _parse_ticks(text: str | None) -> list[int] | None:
    if text is None:
        return None
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--ticks expects comma-separated integers, got {text!r}") from None


def cmd_cluster(args, cli: CliConfig) -> int:
    _require([args.scenes])
    scenes = read_scenes(args.scenes)
    if args.scene is not None:
        scenes = [s for s in scenes if s.name == args.scene]
        if not scenes:
            raise DataError(f"no scene named {args.scene!r}")
    ticks = _parse_ticks(args.ticks)
    records = []
    for s in scenes:
        for t in ticks if ticks is not None else s.timesteps:
            if not 0 <= t < s.n_ticks:
                raise DataError(f"{s.name}: tick {t} outside [0, {s.n_ticks})")
            asg = cluster_tick(s, t, linkage=cli.model.linkage)
            records.append({"scene": s.name, "tick": t, "groups": asg.to_json()})
    body: dict = {"assignments": records}
    if args.annotations is not None:
        _require([args.annotations])
        if len(scenes) != 1 or ticks is None:
            raise UsageError("--annotations needs a single scene (--scene) and explicit --ticks")
        human = load_annotations(args.annotations)
        algo = [GroupAssignment(tuple(tuple(g) for g in r["groups"])) for r in records]
        body["dice"] = dice(algo, human)
        print(f"dice {body['dice']:.6f}")
    cli.out.mkdir(parents=True, exist_ok=True)
    _write_json(cli.out / "groups.json", cli.header("cluster"), body)
    return EXIT_OK


def cmd_train(args, cli: CliConfig) -> int:
    windows = _read_windows(args.windows)
    if not windows:
        raise DataError("no windows to train on")
    model = Grouptron.initialize(cli.model, cli.seed)
    items = _featurize_all(windows, cli.model, cli.jobs)
    cli.out.mkdir(parents=True, exist_ok=True)
    header = cli.header("train")
    result = train(model, items, cli.train, metrics_path=cli.out / "metrics.csv",
                   dump_path=cli.out / "diverged_batch.json", header=header)
    save_checkpoint(cli.out / CHECKPOINT_FILE, model, header, cli)
    if result.history:
        h = result.history
        log.info("loss %.4f -> %.4f over %d steps", h[0].mean_loss, h[-1].mean_loss, result.steps)
    return EXIT_OK


def _eval_header(cli: CliConfig, command: str, info: dict) -> dict:
    # tie outputs to the checkpoint that produced them
    ck = info.get("header", {})
    return cli.header(command) | {"checkpoint_config_hash": ck.get("config_hash"),
                                  "checkpoint_seed": ck.get("seed")}


def cmd_predict(args, cli: CliConfig) -> int:
    model, info = load_checkpoint(args.checkpoint)
    windows = _read_windows(args.windows)
    k = min(args.samples, model.cfg.latent_k)
    preds = _predict(model, windows, k, cli.jobs)
    cli.out.mkdir(parents=True, exist_ok=True)
    recs = [{"scene": w.scene, "t0": w.t0, "node": w.node} | p.to_dict() for w, p in zip(windows, preds)]
    _write_jsonl(cli.out / "predictions.jsonl", _eval_header(cli, "predict", info), recs)
    return EXIT_OK


def cmd_eval(args, cli: CliConfig) -> int:
    model, info = load_checkpoint(args.checkpoint)
    _require(args.windows)
    datasets = {}
    for p in args.windows:
        name = Path(p).stem if Path(p).stem != "windows" else Path(p).parent.name or "windows"
        if name in datasets:
            raise UsageError(f"duplicate dataset name {name!r}")
        datasets[name] = read_windows(p)
    if not any(datasets.values()):
        raise DataError("no windows to evaluate")
    header = _eval_header(cli, "eval", info)
    report = evaluate(model, datasets, k=20, header=header,
                      predictor=lambda ws, k: _predict(model, ws, k, cli.jobs))
    if args.protocol is not None:
        report.rows = [r for r in report.rows if r.protocol in (args.protocol, "constant_velocity")]
    report.write(cli.out)
    for r in report.rows:
        print(f"{r.dataset:<16} {r.protocol:<18} fde {r.fde:.4f}  ade {r.ade:.4f}  n {r.n_windows}")
    return EXIT_OK


def cmd_inspect(args, cli: CliConfig) -> int:
    windows = _read_windows([args.windows])
    if not 0 <= args.index < len(windows):
        raise UsageError(f"--index must lie in [0, {len(windows)})")
    w = windows[args.index]
    if args.checkpoint is not None:
        model, _ = load_checkpoint(args.checkpoint)
        mcfg = model.cfg
    else:
        model, mcfg = None, cli.model
    feats = featurize(w, mcfg)
    if args.level == "individual":
        graphs = [build_individual(w, PerceptionConfig(mcfg.radius))]
    elif args.level == "group":
        graphs = build_group(w, feats.assignment)
    else:
        if model is None:
            raise UsageError("--level scene needs --checkpoint (its nodes are learned group embeddings)")
        graphs = [build_scene(model.group_embeddings(feats))]
    body = {"window": {"scene": w.scene, "t0": w.t0, "node": w.node},
            "assignment": feats.assignment.to_json(), "graphs": [g.to_json() for g in graphs]}
    cli.out.mkdir(parents=True, exist_ok=True)
    _write_json(cli.out / f"graph_{args.level}.json", cli.header("inspect"), body)
    return EXIT_OK


def cmd_plot(args, cli: CliConfig) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    windows = _read_windows(args.windows)
    preds = _predict(model, windows, 0, cli.jobs)
    files = emit_plots(windows, preds, cli.out)
    log.info("wrote %d SVG files", len(files))
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest, "windows": cmd_windows, "cluster": cmd_cluster, "train": cmd_train,
    "predict": cmd_predict, "eval": cmd_eval, "inspect": cmd_inspect, "plot": cmd_plot,
}


def build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file with optional 'model', 'train' and 'seed' keys")
    common.add_argument("--seed", type=int, help="unsigned 64-bit seed (default 0)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for featurization and evaluation")
    common.add_argument("--eth-config", action="store_true", help="scene embedding width 8 instead of 16")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="grouptron", description="Group-aware pedestrian trajectory forecasting.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("ingest", parents=[common], help="parse frame/id/x/y text files into scenes")
    s.add_argument("files", nargs="+")

    s = sub.add_parser("windows", parents=[common], help="cut 8+12 step prediction windows")
    s.add_argument("scenes", help=SCENES_FILE + " from ingest")
    s.add_argument("--min-present", type=int, help="keep windows whose last tick has at least N pedestrians")

    s = sub.add_parser("cluster", parents=[common], help="group pedestrians per tick, optionally score Dice")
    s.add_argument("scenes")
    s.add_argument("--scene", help="restrict to one scene by name")
    s.add_argument("--ticks", help="comma-separated ticks (default: every tick)")
    s.add_argument("--annotations", help="annotation JSON: ticks -> annotators -> groups -> ids")
    s.add_argument("--linkage", choices=("complete", "single", "average"))

    s = sub.add_parser("train", parents=[common], help="train a model on windows")
    s.add_argument("windows", nargs="+")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr0", type=float)
    s.add_argument("--decay", type=float)
    s.add_argument("--clip", type=float)
    s.add_argument("--clip-mode", choices=("global_norm", "value"))
    for name in ("scene_dim", "latent_k"):
        s.add_argument("--" + name.replace("_", "-"), type=int)
    for name in ("alpha", "beta", "radius", "sigma"):
        s.add_argument("--" + name, type=float)
    s.add_argument("--linkage", choices=("complete", "single", "average"))

    s = sub.add_parser("predict", parents=[common], help="write most-likely and top-k predictions")
    s.add_argument("checkpoint")
    s.add_argument("windows", nargs="+")
    s.add_argument("--samples", type=int, default=20)

    s = sub.add_parser("eval", parents=[common], help="FDE/ADE report for one or more window sets")
    s.add_argument("checkpoint")
    s.add_argument("windows", nargs="+")
    s.add_argument("--protocol", choices=PROTOCOLS, help="report only this protocol (default: both)")

    s = sub.add_parser("inspect", parents=[common], help="dump one window's graph as JSON")
    s.add_argument("windows")
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--level", choices=("individual", "group", "scene"), default="individual")
    s.add_argument("--checkpoint")

    s = sub.add_parser("plot", parents=[common], help="SVG plots of most-likely predictions")
    s.add_argument("checkpoint")
    s.add_argument("windows", nargs="+")
    return p


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("grouptron: error: a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        cli = resolve_config(args)
        return COMMANDS[args.command](args, cli)
    except SystemExit as err:
        # --help / --version
        return EXIT_OK if not err.code else EXIT_USAGE
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ValueError, tc.NumericError, TrainingDiverged, ModelStateError, OSError) as err:
        # ParseError is a DataError-style ValueError and carries its line number
        print(f"grouptron: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
