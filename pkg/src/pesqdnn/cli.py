"""Command-line entry point: ``pesqdnn <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 external-tool error.
"""
from __future__ import annotations

import argparse
import io
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from . import tensor as T
from .channel import gen_erasures
from .checkpoint import atomic_write, load_checkpoint, save_checkpoint
from .dataset import read_manifest
from .errors import ExternalToolError, ParameterError, PesqDnnError, ValidationError
from .features import MODES, BLOCK_FRAMES, NormStats, block, compute_norm_stats, extract, read_wav
from .losses import LossConfig, check_compatible, parse_loss_kind
from .metrics import condition_report, report_csv, report_text
from .model import PESQDNN, ModelConfig, micro_config, toy_config
from .training import TrainConfig, TrainItem, TrainState, run_training

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TOOL = 0, 1, 2, 3
COMMANDS = ("featurize", "train", "evaluate", "predict", "simulate-eid")
PRESETS = {"full": lambda **kw: ModelConfig(**kw), "toy": toy_config, "micro": micro_config}
_DEFAULT_LOSS = {"STAT": "utt", "FLE": "fle", "BLE": "ble"}


class UsageError(PesqDnnError):
    pass


@dataclass
class RunConfig:
    """Everything a command consumes. Unknown keys are rejected."""

    command: str
    manifest: str | None = None
    features_dir: str | None = None
    checkpoint: str | None = None
    reports_dir: str | None = None
    state: str | None = None
    log: str | None = None
    inputs: list[str] = field(default_factory=list)
    dump: str | None = None
    out: str | None = None
    resume: bool = False
    seed: int = 0
    workers: int = 1
    precision: str = "f64"
    mode: str = "complex"
    preset: str = "full"
    embedding: str = "fle"
    pooling: str = "av"
    loss: str | None = None
    alpha_base: float = 0.9
    model: dict = field(default_factory=dict)
    lr: float = 1e-4
    epochs: int = 10000
    accumulate: int = 1
    frames: int = 0
    fer: float = 0.0
    kind: str = "random"
    gamma: float = 0.0
    burst_len: float = 4.0

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise UsageError(f"unknown command {self.command!r}")
        if self.precision not in T._DTYPES:
            raise UsageError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.mode not in MODES:
            raise UsageError(f"mode must be amplitude or complex, got {self.mode!r}")
        if self.preset not in PRESETS:
            raise UsageError(f"preset must be one of {sorted(PRESETS)}")
        self.embedding = self.embedding.upper()
        self.pooling = self.pooling.upper()
        if self.embedding not in ("STAT", "FLE", "BLE"):
            raise UsageError(f"embedding must be stat, fle or ble, got {self.embedding!r}")
        if self.pooling not in ("AV", "AT"):
            raise UsageError(f"pooling must be av or at, got {self.pooling!r}")
        if self.loss is None:
            self.loss = _DEFAULT_LOSS[self.embedding]
        try:
            kind = parse_loss_kind(self.loss)
            if kind != "UTTERANCE":
                check_compatible(kind, self.embedding)
        except ValidationError as e:
            raise UsageError(str(e)) from None
        self.loss = {"UTTERANCE": "utt", "FLE": "fle", "BLE": "ble"}[kind]
        if self.workers < 1:
            raise UsageError("workers must be >= 1")
        unknown = set(self.model) - set(ModelConfig.__dataclass_fields__)
        if unknown:
            raise UsageError(f"unknown model keys: {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def canonical_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"), ensure_ascii=True)

    def model_config(self, input_channels: int) -> ModelConfig:
        kw = dict(self.model)
        kw.update(input_channels=input_channels, embedding_mode=self.embedding, pooling=self.pooling)
        kw.setdefault("rng_seed", self.seed)
        return PRESETS[self.preset](**kw)

    def loss_config(self) -> LossConfig:
        return LossConfig(kind=self.loss, alpha_base=self.alpha_base)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, max_epochs=self.epochs, seed=self.seed, accumulate=self.accumulate)


# --- argument parsing -----------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("common options")
    g.add_argument("--config", help="JSON file with run-config keys; command-line flags override it")
    g.add_argument("--seed", type=int, help="seed for initialization, shuffling and generators (default 0)")
    g.add_argument("--workers", type=int, help="parallel workers for per-utterance work (default 1)")
    g.add_argument("--precision", choices=["f32", "f64"], help="arithmetic precision (default f64)")
    g.add_argument("--mode", choices=["amplitude", "complex"], help="spectrogram input (default complex)")
    g.add_argument("--embedding", choices=["stat", "fle", "ble"], help="model head (default fle)")
    g.add_argument("--pooling", choices=["av", "at"], help="average or attention pooling (default av)")
    g.add_argument("--loss", choices=["utt", "fle", "ble"], help="training loss (default matches the head)")
    g.add_argument("--print-config", action="store_true", help="print the canonical run config and exit")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="pesqdnn", description="Non-intrusive PESQ estimation for coded speech.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("featurize", help="extract and normalize feature blocks for a manifest")
    p.add_argument("--manifest", required=True, help="JSON-lines manifest")
    p.add_argument("--features-dir", required=True, help="output feature store")
    _common(p)

    p = sub.add_parser("train", help="train a model on a feature store")
    p.add_argument("--features-dir", required=True, help="feature store written by featurize")
    p.add_argument("--checkpoint", required=True, help="output checkpoint path")
    p.add_argument("--state", help="resumable train-state path (default <checkpoint>.state)")
    p.add_argument("--log", help="JSON-lines epoch log (default <checkpoint>.log.jsonl)")
    p.add_argument("--resume", action="store_true", help="continue from the train-state file if present")
    p.add_argument("--preset", choices=sorted(PRESETS), help="model size (default full)")
    p.add_argument("--lr", type=float, help="initial learning rate (default 1e-4)")
    p.add_argument("--epochs", type=int, help="maximum number of epochs (default 10000)")
    p.add_argument("--accumulate", type=int, help="utterances per optimizer step (default 1)")
    _common(p)

    p = sub.add_parser("evaluate", help="per-condition MAE/LCC report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--reports-dir", required=True, help="where report.csv, report.txt and scatter.csv go")
    _common(p)

    p = sub.add_parser("predict", help="estimate PESQ for WAV files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("inputs", nargs="+", help="16 kHz mono WAV files")
    p.add_argument("--dump", help="write block scores and attention weights as JSON")
    _common(p)

    p = sub.add_parser("simulate-eid", help="write a frame-erasure pattern file")
    p.add_argument("--frames", type=int, required=True, help="number of transmitted frames")
    p.add_argument("--fer", type=float, required=True, help="target frame error rate")
    p.add_argument("--kind", choices=["random", "burst"], default=None, help="erasure model (default random)")
    p.add_argument("--gamma", type=float, help="Gilbert burstiness for random mode (default 0)")
    p.add_argument("--burst-len", type=float, help="mean burst length for burst mode (default 4)")
    p.add_argument("--out", required=True, help="pattern file to write")
    _common(p)
    return ap


def resolve_config(args: argparse.Namespace) -> RunConfig:
    base: dict = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from None
        if not isinstance(base, dict):
            raise UsageError("config file must hold a JSON object")
    skip = {"config", "print_config"}
    for k, v in vars(args).items():
        if k not in skip and v is not None and v is not False:
            base[k] = v
    base["command"] = args.command
    return RunConfig.from_dict(base)


# --- logging ------------------------------------------------------------------------

def _jsonl_logger(path) -> Callable[[dict], None]:
    f = open(path, "a")

    def log(rec: dict) -> None:
        f.write(json.dumps(rec, sort_keys=True) + "\n")
        f.flush()

    log.close = f.close  # type: ignore[attr-defined]
    return log


def _map(fn, items, workers: int) -> list:
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# --- commands -------------------------------------------------------------------------

def cmd_featurize(cfg: RunConfig, out=sys.stdout) -> int:
    """Write ``<id>.npy`` blocks, ``norm_stats.json`` and ``index.json``.

    Statistics come from the train split only and are applied to every split.
    """
    manifest = Path(cfg.manifest)
    records = read_manifest(manifest)
    store = Path(cfg.features_dir)
    store.mkdir(parents=True, exist_ok=True)

    def load(rec):
        try:
            return rec, extract(read_wav(rec.resolve_audio(manifest.parent)), cfg.mode), None
        except (PesqDnnError, OSError, ValueError) as e:
            return rec, None, f"{rec.id}: {e}"

    loaded = _map(load, records, cfg.workers)
    errors = [err for _, _, err in loaded if err]
    train_feats = [f for r, f, _ in loaded if f is not None and r.split == "train"]
    if not train_feats:
        errors.append("no readable train-split utterances; cannot compute normalization statistics")
        for e in errors:
            print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    stats = compute_norm_stats(train_feats, cfg.mode)
    entries = []
    for rec, feats, err in loaded:
        if feats is None:
            continue
        try:
            seq = block(feats, stats, rec.id)
        except PesqDnnError as e:
            errors.append(f"{rec.id}: {e}")
            continue
        fname = f"{rec.id}.npy"
        buf = _npy_bytes(seq.blocks.astype(np.float32))
        atomic_write(store / fname, buf)
        entries.append({"id": rec.id, "split": rec.split, "file": fname, "num_frames": int(feats.shape[0]),
                        "num_blocks": int(seq.num_blocks), "discarded_frames": int(seq.discarded_frames),
                        "pesq_target": rec.pesq_target})
    atomic_write(store / "norm_stats.json", json.dumps(stats.to_dict(), sort_keys=True).encode())
    index = {"mode": cfg.mode, "block_frames": BLOCK_FRAMES, "manifest": str(manifest), "utterances": entries,
             "norm_stats": "norm_stats.json"}
    atomic_write(store / "index.json", json.dumps(index, sort_keys=True, indent=1).encode())
    print(f"featurized {len(entries)} utterances into {store}", file=out)
    for e in errors:
        print(f"error: {e}", file=sys.stderr)
    return EXIT_DATA if errors else EXIT_OK


def _npy_bytes(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, a, allow_pickle=False)
    return buf.getvalue()


def load_store(features_dir) -> tuple[dict, NormStats, dict[str, list[TrainItem]]]:
    store = Path(features_dir)
    try:
        index = json.loads((store / "index.json").read_text())
    except OSError as e:
        raise ValidationError(f"no feature store at {store}: {e}") from None
    stats = NormStats.load(store / index["norm_stats"])
    splits: dict[str, list[TrainItem]] = {"train": [], "dev": [], "test": []}
    for e in index["utterances"]:
        blocks = np.load(store / e["file"], allow_pickle=False)
        splits[e["split"]].append(TrainItem(e["id"], blocks, e["pesq_target"]))
    return index, stats, splits


def cmd_train(cfg: RunConfig, out=sys.stdout) -> int:
    index, stats, splits = load_store(cfg.features_dir)
    train, dev = splits["train"], splits["dev"]
    if not train or not dev:
        raise ValidationError(f"feature store needs train and dev utterances (got {len(train)} and {len(dev)})")
    ckpt_path = Path(cfg.checkpoint)
    state_path = Path(cfg.state) if cfg.state else ckpt_path.with_name(ckpt_path.name + ".state")
    log_path = Path(cfg.log) if cfg.log else ckpt_path.with_name(ckpt_path.name + ".log.jsonl")
    dtype = T._DTYPES[cfg.precision]
    state = None
    if cfg.resume and state_path.exists():
        state = TrainState.load(state_path)
        if state.model.dtype != np.dtype(dtype):
            raise UsageError(f"state file uses {state.model.dtype}, run asked for {cfg.precision}")
        model = state.model
    else:
        mcfg = cfg.model_config(MODES[index["mode"]])
        model = PESQDNN(mcfg, dtype=dtype)
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    log = _jsonl_logger(log_path)
    try:
        with T.default_dtype(dtype):
            res = run_training(model, train, dev, cfg.train_config(), cfg.loss_config(), stats,
                               state=state, log=log, state_path=state_path)
    finally:
        log.close()
    res.checkpoint.meta["run_config"] = json.loads(cfg.canonical_json())
    save_checkpoint(res.checkpoint, ckpt_path)
    best = res.checkpoint.meta["best_dev_loss"]
    print(f"best dev loss {best:.6f} at epoch {res.checkpoint.meta['best_epoch']}", file=out)
    print(f"checkpoint {ckpt_path}", file=out)
    return EXIT_OK


def _load_model(cfg: RunConfig):
    ck = load_checkpoint(cfg.checkpoint)
    if ck.norm_stats is None:
        raise ValidationError(f"checkpoint {cfg.checkpoint} carries no normalization statistics")
    return ck, PESQDNN(ck.config, ck.weights, dtype=T._DTYPES[cfg.precision])


def _predict_file(model: PESQDNN, stats: NormStats, path, uid: str):
    feats = extract(read_wav(path), stats.mode)
    return model.predict(block(feats, stats, uid))


def cmd_evaluate(cfg: RunConfig, out=sys.stdout) -> int:
    manifest = Path(cfg.manifest)
    records = read_manifest(manifest)
    missing = [r.id for r in records if r.pesq_target is None]
    if missing:
        raise ValidationError(f"utterances without pesq_target: {missing}")
    ck, model = _load_model(cfg)

    def run(rec):
        return _predict_file(model, ck.norm_stats, rec.resolve_audio(manifest.parent), rec.id)

    preds = _map(run, records, cfg.workers)
    estimates = {r.id: p.pesq_hat for r, p in zip(records, preds)}
    rows = condition_report([r.to_dict() for r in records], estimates)
    reports = Path(cfg.reports_dir)
    reports.mkdir(parents=True, exist_ok=True)
    atomic_write(reports / "report.csv", report_csv(rows).encode())
    text = report_text(rows)
    atomic_write(reports / "report.txt", text.encode())
    scatter = "id,pesq_target,pesq_hat\n" + "".join(
        f"{r.id},{r.pesq_target:.6f},{estimates[r.id]:.6f}\n" for r in records)
    atomic_write(reports / "scatter.csv", scatter.encode())
    out.write(text)
    return EXIT_OK


def cmd_predict(cfg: RunConfig, out=sys.stdout) -> int:
    ck, model = _load_model(cfg)
    dump = {}
    for path in cfg.inputs:
        uid = Path(path).stem
        pred = _predict_file(model, ck.norm_stats, path, uid)
        print(f"{uid}\t{pred.pesq_hat:.3f}", file=out)
        dump[uid] = pred.to_dict()
    if cfg.dump:
        atomic_write(cfg.dump, json.dumps(dump, sort_keys=True, indent=1).encode())
    return EXIT_OK


def cmd_simulate_eid(cfg: RunConfig, out=sys.stdout) -> int:
    pat = gen_erasures(cfg.frames, cfg.fer, cfg.kind, cfg.seed, cfg.gamma, cfg.burst_len)
    pat.save(cfg.out)
    print(f"empirical_rate {pat.empirical_rate:.6f} ({int(pat.bits.sum())}/{pat.bits.size} frames lost)", file=out)
    return EXIT_OK


HANDLERS = {"featurize": cmd_featurize, "train": cmd_train, "evaluate": cmd_evaluate,
            "predict": cmd_predict, "simulate-eid": cmd_simulate_eid}


def main(argv: Sequence[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = resolve_config(args)
    except (UsageError, ValidationError, TypeError) as e:
        print(f"pesqdnn: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    if args.print_config:
        print(cfg.canonical_json(), file=out)
        return EXIT_OK
    try:
        return HANDLERS[cfg.command](cfg, out)
    except (UsageError, ParameterError) as e:
        print(f"pesqdnn: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ExternalToolError as e:
        print(f"pesqdnn: external tool error: {e}", file=sys.stderr)
        return EXIT_TOOL
    except (PesqDnnError, OSError, ValueError, KeyError) as e:
        print(f"pesqdnn: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
