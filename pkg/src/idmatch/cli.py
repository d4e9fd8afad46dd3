"""Command-line entry point: ``idmatch <command> [flags]``.

Every command writes into ``--out-dir`` (``match`` may write to stdout
instead) together with ``config.json``, the resolved flags, and
``manifest.json``, which records the config hash, seeds, artifact hashes,
timestamps and the library version. Everything except the manifest is
byte-identical across reruns with the same flags.

Exit codes: 0 success, 1 invalid parameters or failed run, 2 bad usage or
unreadable inputs, 3 training diverged, 4 refused to overwrite.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .assignment import hungarian_match
from .diffusion import SchedulerConfig, TrainState, load_checkpoint, save_checkpoint
from .embedding import DomainError
from .rewards import RewardConfig
from .seeding import derive_rng
from .toy_world import ToyWorld, load_dataset, make_dataset, sample_universe, save_dataset
from .trainer import (
    MODE_ALIASES,
    RunConfig,
    TrainingDiverged,
    encode,
    evaluate,
    make_model,
    pretrain,
    reward_vs_step_curve,
    split_indices,
    stability_statistic,
    train,
)

logger = logging.getLogger("idmatch")

EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_DIVERGED, EXIT_REFUSED = 0, 1, 2, 3, 4

DATASET_FILE = "dataset.jsonl"
CHECKPOINT_FILE = "checkpoint.json"

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["command", "config_hash", "config_file", "seeds", "artifacts", "started_at", "finished_at",
                 "library_version"],
    "properties": {
        "command": {"type": "string"},
        "config_hash": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "config_file": {"type": "string"},
        "seeds": {"type": "array", "items": {"type": "integer"}},
        "artifacts": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["path", "sha256"],
                "properties": {"path": {"type": "string"}, "sha256": {"type": "string"}},
            },
        },
        "started_at": {"type": "string"},
        "finished_at": {"type": "string"},
        "library_version": {"type": "string"},
    },
}

ASSIGNMENT_SCHEMA = {
    "type": "object",
    "required": ["pairs", "total_weight", "shape"],
    "properties": {
        "pairs": {"type": "array", "items": {"type": "array", "items": {"type": "integer"}, "minItems": 2,
                                             "maxItems": 2}},
        "total_weight": {"type": "number"},
        "shape": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
    },
}

REPORTS_SCHEMA = {
    "type": "object",
    "required": ["label", "n_samples", "id_sim", "id_conf", "reports"],
    "properties": {
        "n_samples": {"type": "integer", "minimum": 0},
        "reports": {
            "type": "array",
            "items": {"type": "object", "required": ["id_sim", "id_conf", "missing_faces", "per_reference"]},
        },
    },
}


class UsageError(Exception):
    """Bad flags or unreadable inputs (exit code 2)."""


class RefusedError(Exception):
    """Output exists and ``--on-exists refuse`` was given (exit code 4)."""


# ---------------------------------------------------------------- helpers


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _m_range(text: str) -> tuple[int, int]:
    lo, sep, hi = text.partition("..")
    try:
        pair = (int(lo), int(hi if sep else lo))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO..HI, got {text!r}") from None
    return pair


def _optional_float(text: str) -> float | None:
    return None if str(text).lower() == "none" else float(text)


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x)


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, np.integer):
        return str(int(x))
    return str(x)


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    with open(path, newline="") as f:
        back = list(csv.reader(f))
    if back[0] != header or any(len(r) != len(header) for r in back[1:]):
        raise DomainError(f"{path} failed its column check")


def _write_json(path: Path, obj, schema: dict | None = None) -> None:
    if schema is not None:
        jsonschema.validate(obj, schema)
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=True) + "\n")


def _json_ready(value):
    if isinstance(value, tuple):
        return [_json_ready(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    return value


class Run:
    """Output directory bookkeeping for one command invocation."""

    def __init__(self, command: str, args: argparse.Namespace, out_dir: Path):
        self.command = command
        self.out_dir = Path(out_dir)
        self.started = _now()
        self.artifacts: dict[str, Path] = {}
        skip = {"func", "config", "quiet", "out_dir", "on_exists", "command"}
        self.config = {k: _json_ready(v) for k, v in sorted(vars(args).items()) if k not in skip}
        manifest = self.out_dir / "manifest.json"
        if manifest.exists() and args.on_exists == "refuse":
            raise RefusedError(f"{self.out_dir} already holds a run; pass --on-exists overwrite to replace it")
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        p = self.out_dir / name
        self.artifacts[name] = p
        return p

    def finish(self, seeds) -> Path:
        cfg_path = self.out_dir / "config.json"
        cfg_path.write_text(json.dumps(self.config, indent=1, sort_keys=True) + "\n")
        manifest = {
            "command": self.command,
            "config_file": "config.json",
            "config_hash": _sha256(cfg_path),
            "seeds": [int(s) for s in seeds],
            "artifacts": {
                name: {"path": p.name, "sha256": _sha256(p)} for name, p in sorted(self.artifacts.items())
            },
            "started_at": self.started,
            "finished_at": _now(),
            "library_version": __version__,
        }
        path = self.out_dir / "manifest.json"
        _write_json(path, manifest, MANIFEST_SCHEMA)
        return path


def _dataset_path(arg: str) -> Path:
    p = Path(arg)
    if p.is_dir():
        p = p / DATASET_FILE
    if not p.exists():
        raise UsageError(f"dataset not found: {arg}")
    return p


def _checkpoint_path(arg: str) -> Path:
    p = Path(arg)
    if p.is_dir():
        p = p / CHECKPOINT_FILE
    if not p.exists():
        raise UsageError(f"checkpoint not found: {arg}")
    return p


def _load_split(args):
    world, samples, header = load_dataset(_dataset_path(args.data))
    data = encode(world, samples)
    train_idx, eval_idx = split_indices(len(data), args.eval_fraction)
    return world, samples, data, train_idx, eval_idx


def _say(args, text: str) -> None:
    if not args.quiet:
        print(text)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    run = Run("gen-data", args, args.out_dir)
    lo, hi = args.m
    universe = sample_universe(args.k, args.d, args.min_sep, args.sigma_intra, args.seed)
    world = ToyWorld.build(universe, args.slots or hi, d_embed=args.d_embed, threshold=args.threshold)
    samples = make_dataset(universe, args.n, (lo, hi), derive_rng(args.seed, "data"), world.n_slots)
    header = save_dataset(run.path(DATASET_FILE), world, samples, {"seed": args.seed, "m_range": [lo, hi]})
    run.artifacts[header.name] = header
    run.finish([args.seed])
    _say(args, f"wrote {len(samples)} samples to {run.out_dir / DATASET_FILE}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    world, _, data, train_idx, _ = _load_split(args)
    run = Run("pretrain", args, args.out_dir)
    sched = SchedulerConfig(T=args.T)
    model = make_model(world, sched, args.seed, hidden=args.hidden, sigma_data=args.sigma_data)
    state = TrainState.fresh(model, args.lr, derive_rng(args.seed, "pretrain"))
    state.meta = {"phase": "pretrain", "seed": args.seed}
    try:
        losses = pretrain(state, data.subset(train_idx), sched, args.steps, args.batch_size)
    except TrainingDiverged as err:
        _write_json(run.path("divergence.json"), err.snapshot)
        run.finish([args.seed])
        logger.error("%s", err)
        return EXIT_DIVERGED
    save_checkpoint(run.path(CHECKPOINT_FILE), state, sched)
    _write_csv(run.path("loss_curve.csv"), ["step", "loss"], ((i + 1, l) for i, l in enumerate(losses)))
    run.finish([args.seed])
    if losses:
        _say(args, f"pretrained {args.steps} steps, final loss {np.mean(losses[-50:]):.4f}")
    return EXIT_OK


HISTORY_COLUMNS = ["step", "mode", "seed", "id_sim", "id_conf", "mean_reward", "l_diff", "l_rerefl"]


def cmd_train(args) -> int:
    mode = MODE_ALIASES[args.mode]
    world, samples, data, train_idx, eval_idx = _load_split(args)
    if mode == "rerefl_sir" and any(s.M > 1 for s in samples):
        logger.warning("mode sir on a dataset with several references: only the first reference is rewarded")
    run = Run("train", args, Path(args.out_dir) / args.mode)
    if args.resume:
        state, sched = load_checkpoint(_checkpoint_path(args.resume))
        if state.meta.get("mode") != mode:
            raise UsageError(f"cannot resume a {state.meta.get('mode')!r} run in mode {mode!r}")
    else:
        if not args.checkpoint:
            raise UsageError("train needs --checkpoint (pretrained) or --resume")
        state, sched = load_checkpoint(_checkpoint_path(args.checkpoint))
        state.reset_optimizer(args.lr)
        state.rng = derive_rng(args.seed, "train", mode)
        state.step = 0
    sched = sched or SchedulerConfig()
    state.meta = {"phase": "train", "mode": mode, "seed": args.seed}
    reward = RewardConfig(lambda1=args.lambda1, lambda2=args.lambda2, pretrain_weight=args.pretrain_weight)
    cfg = RunConfig(mode=mode, scheduler=sched, reward=reward, learning_rate=args.lr, batch_size=args.batch_size,
                    total_steps=args.steps, seed=args.seed, eval_every=args.eval_every)
    eval_data = data.subset(eval_idx) if len(eval_idx) else None
    try:
        state, history = train(cfg, state, data.subset(train_idx), world, eval_data)
    except TrainingDiverged as err:
        _write_json(run.path("divergence.json"), err.snapshot)
        run.finish([args.seed])
        logger.error("%s", err)
        return EXIT_DIVERGED
    save_checkpoint(run.path(CHECKPOINT_FILE), state, sched)
    _write_csv(run.path("history.csv"), HISTORY_COLUMNS, ([r[c] for c in HISTORY_COLUMNS] for r in history))
    summary = {"mode": mode, "seed": args.seed, "steps": state.step, "final": history[-1] if history else None}
    _write_json(run.path("summary.json"), summary)
    run.finish([args.seed])
    if history:
        last = history[-1]
        _say(args, f"{mode} step {last['step']}: id_sim {last['id_sim']:.4f} id_conf {last['id_conf']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    world, _, data, train_idx, eval_idx = _load_split(args)
    idx = {"eval": eval_idx, "train": train_idx, "all": np.arange(len(data))}[args.split]
    subset = data.subset(idx)
    run = Run("eval", args, args.out_dir)
    if args.ground_truth:
        label, model, sched, samples = "ground_truth", None, SchedulerConfig(), subset.x0
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint unless --ground-truth is given")
        state, sched = load_checkpoint(_checkpoint_path(args.checkpoint))
        label = state.meta.get("mode", state.meta.get("phase", "model"))
        model, sched, samples = state.model, sched or SchedulerConfig(), None
    ev = evaluate(model, sched, world, subset, args.seed, samples=samples)
    report = {
        "label": label,
        "split": args.split,
        "n_samples": ev["n_samples"],
        "id_sim": ev["id_sim"],
        "id_conf": ev["id_conf"],
        "missing_faces": ev["missing_faces"],
        "reports": [r.to_dict() for r in ev["reports"]],
    }
    _write_json(run.path("reports.json"), report, REPORTS_SCHEMA)
    _write_csv(run.path("metrics.csv"), ["mode", "id_sim", "id_conf", "n_samples"],
               [[label, ev["id_sim"], ev["id_conf"], ev["n_samples"]]])
    run.finish([args.seed])
    _say(args, f"{label}: id_sim {ev['id_sim']:.4f} id_conf {ev['id_conf']:.4f} over {ev['n_samples']} samples")
    return EXIT_OK


def _read_matrix(source: str):
    try:
        text = sys.stdin.read() if source == "-" else Path(source).read_text()
        obj = json.loads(text)
    except (OSError, json.JSONDecodeError) as err:
        raise UsageError(f"cannot read a matrix from {source}: {err}") from None
    if isinstance(obj, dict):
        obj = obj.get("matrix")
    try:
        e = np.array(obj, dtype=np.float64)
    except (TypeError, ValueError):
        raise UsageError("matrix must be a rectangular list of numeric rows") from None
    if e.ndim != 2:
        raise UsageError(f"matrix must be 2-d, got shape {e.shape}")
    return e


def cmd_match(args) -> int:
    e = _read_matrix(args.input)
    a = hungarian_match(e)
    out = {"pairs": [list(p) for p in a.pairs], "total_weight": a.total_weight, "shape": list(e.shape)}
    jsonschema.validate(out, ASSIGNMENT_SCHEMA)
    if args.out_dir is None:
        print(json.dumps(out, sort_keys=True))
        return EXIT_OK
    run = Run("match", args, args.out_dir)
    _write_json(run.path("assignment.json"), out, ASSIGNMENT_SCHEMA)
    run.finish([])
    _say(args, json.dumps(out, sort_keys=True))
    return EXIT_OK


def cmd_curve(args) -> int:
    state, sched = load_checkpoint(_checkpoint_path(args.checkpoint))
    world, _, data, _, _ = _load_split(args)
    if not 0 <= args.index < len(data):
        raise UsageError(f"sample index {args.index} out of range for {len(data)} samples")
    run = Run("curve", args, args.out_dir)
    sched = sched or SchedulerConfig()
    curve = reward_vs_step_curve(state.model, sched, world, data, args.index, args.seeds, args.seed)
    rows = ((k, s, curve[s, k]) for s in range(curve.shape[0]) for k in range(curve.shape[1]))
    _write_csv(run.path("curve.csv"), ["step", "seed", "reward"], rows)
    first, last = stability_statistic(curve)
    _write_json(run.path("stability.json"), {"std_first": first, "std_last": last, "fraction": 0.4,
                                              "n_seeds": args.seeds, "steps": sched.T})
    run.finish([args.seed])
    _say(args, f"reward std across seeds: first 40% {first:.4f}, last 40% {last:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of flag values; explicit flags win")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--quiet", action="store_true")
    common.add_argument("--on-exists", choices=("overwrite", "refuse"), default="overwrite")

    data_flags = argparse.ArgumentParser(add_help=False)
    data_flags.add_argument("--data", required=True, help="dataset file or the directory holding it")
    data_flags.add_argument("--eval-fraction", type=float, default=0.1, help="held-out tail of the dataset")

    parser = argparse.ArgumentParser(prog="idmatch", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = sub.add_parser("gen-data", parents=[common], help="sample an identity universe and a dataset")
    p.add_argument("--k", type=int, default=12, help="number of identities")
    p.add_argument("--d", type=int, default=16, help="identity dimension")
    p.add_argument("--min-sep", type=float, default=1.0, help="minimum angle between identities (rad)")
    p.add_argument("--sigma-intra", type=float, default=0.15, help="within-identity angular spread (rad)")
    p.add_argument("--m", type=_m_range, default=(2, 4), help="identities per sample, LO..HI")
    p.add_argument("--n", type=int, default=2000, help="number of samples")
    p.add_argument("--slots", type=int, default=None, help="face slots per sample (default: HI)")
    p.add_argument("--d-embed", type=int, default=128)
    p.add_argument("--threshold", type=float, default=0.25)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_gen_data)
    subs["gen-data"] = p

    p = sub.add_parser("pretrain", parents=[common, data_flags], help="diffusion-loss training from scratch")
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--T", type=int, default=25, help="diffusion steps")
    p.add_argument("--hidden", type=_int_tuple, default=(128, 128, 128))
    p.add_argument("--sigma-data", type=_optional_float, default=0.3,
                   help="data scale for output preconditioning; 'none' predicts noise directly")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_pretrain)
    subs["pretrain"] = p

    p = sub.add_parser("train", parents=[common, data_flags], help="fine-tune a pretrained checkpoint")
    p.add_argument("--mode", choices=("sft", "sir", "mimr"), required=True)
    p.add_argument("--checkpoint", help="pretrained checkpoint")
    p.add_argument("--resume", help="checkpoint of an interrupted run of the same mode")
    p.add_argument("--steps", type=int, default=1500, help="total steps, counting resumed ones")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--eval-every", type=int, default=500)
    p.add_argument("--lambda1", type=float, default=1.0)
    p.add_argument("--lambda2", type=float, default=-1.0)
    p.add_argument("--pretrain-weight", type=float, default=1.0)
    p.add_argument("--out-dir", required=True, help="outputs go to OUT_DIR/MODE")
    p.set_defaults(func=cmd_train)
    subs["train"] = p

    p = sub.add_parser("eval", parents=[common, data_flags], help="identity metrics on a split")
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=("eval", "train", "all"), default="eval")
    p.add_argument("--ground-truth", action="store_true", help="score the dataset targets themselves")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_eval)
    subs["eval"] = p

    p = sub.add_parser("match", parents=[common], help="optimal assignment for a similarity matrix")
    p.add_argument("--input", default="-", help="JSON matrix file, or - for stdin")
    p.add_argument("--out-dir", default=None, help="write assignment.json here instead of stdout")
    p.set_defaults(func=cmd_match)
    subs["match"] = p

    p = sub.add_parser("curve", parents=[common, data_flags], help="reward of the predicted sample per step")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", type=int, default=0, help="dataset sample to condition on")
    p.add_argument("--seeds", type=int, default=8, help="number of sampling seeds")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_curve)
    subs["curve"] = p
    return parser, subs


def _apply_config(parser: argparse.ArgumentParser, sub: argparse.ArgumentParser, path: str) -> None:
    try:
        values = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        parser.error(f"cannot read config {path}: {err}")
    if not isinstance(values, dict):
        parser.error("config file must hold a JSON object")
    actions = {a.dest: a for a in sub._actions}
    converted = {}
    for key, value in values.items():
        dest = key.replace("-", "_")
        action = actions.get(dest)
        if action is None or dest in ("help", "config"):
            parser.error(f"unknown config key: {key}")
        if action.type is not None and isinstance(value, str):
            value = action.type(value)
        elif isinstance(value, list):
            value = tuple(value)
        converted[dest] = value
        action.required = False
    sub.set_defaults(**converted)


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser, subs = build_parser()
    command = next((a for a in argv if not a.startswith("-")), None)
    if command in subs:
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config")
        known, _ = pre.parse_known_args(argv)
        if known.config:
            _apply_config(parser, subs[command], known.config)
    return parser.parse_args(argv)


class _StderrHandler(logging.StreamHandler):
    """Writes to whatever ``sys.stderr`` is at emit time."""

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, _value):
        pass


def _configure_logging(quiet: bool) -> None:
    pkg = logging.getLogger("idmatch")
    if not any(isinstance(h, _StderrHandler) for h in pkg.handlers):
        handler = _StderrHandler()
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        pkg.addHandler(handler)
    pkg.setLevel(logging.WARNING if quiet else logging.INFO)


def main(argv: list[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _configure_logging(args.quiet)
    try:
        return args.func(args)
    except UsageError as err:
        logger.error("%s", err)
        return EXIT_USAGE
    except RefusedError as err:
        logger.error("%s", err)
        return EXIT_REFUSED
    except (DomainError, jsonschema.ValidationError) as err:
        logger.error("%s", err)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
