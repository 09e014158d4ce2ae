"""Command-line entry point for reproducible experiment runs.

Subcommands: gen-data, pretrain, fewshot, infer, report. Every run resolves
its configuration (JSON file overlaid on defaults, CLI flags on top),
echoes the resolved values into the output directory, and draws all
randomness from named substreams of the single global seed. Rerunning any
command with identical config and seed produces byte-identical outputs.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
divergence.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DivergedLoss,
    FewspikeError,
    InvalidConfig,
    Overflow,
    ParseError,
    CheckpointError,
    EmptyDataset,
    InsufficientSamples,
)
from .events import EventFormat, load_event_file, save_event_file, bin_events
from .fewshot import (
    build_episodes,
    classify,
    cross_validate,
    manifest_dataset,
)
from .network import build_network, load_checkpoint, run_network, save_checkpoint
from .neuron import NeuronParams
from .plasticity import SoelConfig, window_log_csv
from .pretrain import AugmentConfig, SurrogateConfig, TrainerConfig, train
from .rng import substream_seed
from .synth import N_CLASSES, load_catalog, synth_gesture

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


@dataclass
class DataConfig:
    classes: list[int] = field(default_factory=lambda: list(range(N_CLASSES)))
    samples_per_class: int = 20
    duration_ms: int = 1450
    width: int = 128
    height: int = 128


@dataclass
class NetworkConfig:
    arch: list[str] = field(default_factory=lambda: ["4a", "16c5z", "2a", "32c3z", "2a", "512"])
    input: list[int] = field(default_factory=lambda: [2, 128, 128])
    n_outputs: int = 6
    u_threshold: int = 5120
    current_decay: int = 1024
    voltage_decay: int = 128
    bias: int = 0


@dataclass
class PretrainConfig:
    epochs: int = 10
    learning_rate: float = 0.003
    batch_size: int = 8
    truncation: int = 64
    target_true: float = 30.0
    target_false: float = 5.0
    surrogate_half_width: float = 2560.0
    surrogate_scale: float = 1.0 / 5120.0
    init_scale_mul: float = 1.0
    augment_xy: int = 8
    augment_rot_deg: float = 10.0
    augment_window_ms: int = 1450
    use_augment: bool = True


@dataclass
class SoelSection:
    eta: float = 1.0 / 64.0
    c_offset: int = 64
    t_interval: int = 32
    theta_inc: float = 1.0
    theta_dec: float = 1.0
    target_y_active: int = 10
    target_y_inactive: int = 0
    impulse: float = 16.0


@dataclass
class FewshotConfig:
    n_pretrain: int = 6
    n_novel: int = 5
    shots: list[int] = field(default_factory=lambda: [1, 5, 20])
    folds: int = 5


@dataclass
class RunConfig:
    seed: int | None = None
    out: str = "out"
    jobs: int = 1
    precision: str = "full"  # "hw" or "full"
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    soel: SoelSection = field(default_factory=SoelSection)
    fewshot: FewshotConfig = field(default_factory=FewshotConfig)


def _merge(dc, overrides: dict):
    for key, value in overrides.items():
        if not hasattr(dc, key):
            raise InvalidConfig(f"unknown config key {key!r} in {type(dc).__name__}")
        current = getattr(dc, key)
        if dataclasses.is_dataclass(current) and isinstance(value, dict):
            _merge(current, value)
        else:
            setattr(dc, key, value)
    return dc


def load_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        try:
            with open(args.config) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise InvalidConfig(f"cannot read config: {exc}") from exc
        except ValueError as exc:
            raise InvalidConfig(f"config is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise InvalidConfig("config root must be an object")
        _merge(cfg, raw)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if args.jobs is not None:
        cfg.jobs = args.jobs
    if args.precision is not None:
        cfg.precision = args.precision
    if cfg.seed is None:
        raise InvalidConfig("a seed is mandatory (--seed or config.seed)")
    if cfg.precision not in ("hw", "full"):
        raise InvalidConfig("precision must be 'hw' or 'full'")
    return cfg


def _echo_config(cfg: RunConfig, out_dir: Path, command: str) -> None:
    resolved = dataclasses.asdict(cfg)
    resolved["command"] = command
    path = out_dir / "resolved_config.json"
    path.write_text(json.dumps(resolved, sort_keys=True, indent=2) + "\n")


def _neuron_params(ncfg: NetworkConfig) -> NeuronParams:
    return NeuronParams(u_threshold=ncfg.u_threshold,
                        current_decay=ncfg.current_decay,
                        voltage_decay=ncfg.voltage_decay,
                        bias=ncfg.bias)


# --- subcommands ---

def cmd_gen_data(cfg: RunConfig) -> int:
    out_dir = Path(cfg.out)
    data_dir = out_dir / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out_dir, "gen-data")
    catalog = load_catalog()
    for c in cfg.data.classes:
        if c not in catalog:
            raise InvalidConfig(f"class {c} not in generator catalog")
    rows = []
    for c in cfg.data.classes:
        for i in range(cfg.data.samples_per_class):
            sample_seed = substream_seed(cfg.seed, "sample", c, i)
            stream = synth_gesture(c, sample_seed, cfg.data.duration_ms,
                                   cfg.data.width, cfg.data.height)
            rel = f"class{c:02d}_{i:03d}.bin"
            save_event_file(stream, data_dir / rel, EventFormat.BIN_EVENTS)
            rows.append((c, sample_seed, rel, stream.duration))
    with open(out_dir / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "seed", "path", "duration_us"])
        writer.writerows(rows)
    print(f"wrote {len(rows)} event files to {data_dir}")
    return EXIT_OK


def _trainer_config(cfg: RunConfig) -> TrainerConfig:
    p = cfg.pretrain
    return TrainerConfig(
        learning_rate=p.learning_rate,
        epochs=p.epochs,
        batch_size=p.batch_size,
        truncation=p.truncation,
        target_true=p.target_true,
        target_false=p.target_false,
        surrogate=SurrogateConfig(half_width=p.surrogate_half_width,
                                  scale=p.surrogate_scale),
        state_mode="int" if cfg.precision == "hw" else "float",
        seed=cfg.seed,
        augment=AugmentConfig(p.augment_xy, p.augment_rot_deg, p.augment_window_ms)
        if p.use_augment else None,
    )


def cmd_pretrain(cfg: RunConfig, data_dir: str) -> int:
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out_dir, "pretrain")
    data_root = Path(data_dir)
    manifest = data_root / "manifest.csv"
    if not manifest.exists():
        raise InvalidConfig(f"no manifest at {manifest}")
    dataset = manifest_dataset(manifest, data_root / "data")

    pretrain_classes = dataset.classes[0::2][:cfg.network.n_outputs]
    if len(pretrain_classes) < cfg.network.n_outputs:
        raise InsufficientSamples("not enough classes for the pretrain split")
    label_of = {c: i for i, c in enumerate(pretrain_classes)}
    data = [(s.load(), label_of[c]) for c in pretrain_classes
            for s in dataset.by_class[c]]

    params = _neuron_params(cfg.network)
    net = build_network(tuple(cfg.network.input), cfg.network.arch,
                        cfg.network.n_outputs, params)
    result = train(net, data, _trainer_config(cfg))
    save_checkpoint(result.net, out_dir / "checkpoint.json")
    with open(out_dir / "loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "acc"])
        for epoch, loss, acc in result.loss_curve:
            writer.writerow([epoch, repr(loss), repr(acc)])
    final = result.loss_curve[-1] if result.loss_curve else (0, float("nan"), float("nan"))
    print(f"pretrained {len(data)} samples, {cfg.pretrain.epochs} epochs, "
          f"final loss {final[1]:.3f}, train acc {final[2]:.3f}")
    return EXIT_OK


def _soel_config(cfg: RunConfig) -> SoelConfig:
    s = cfg.soel
    return SoelConfig(eta=s.eta, c_offset=s.c_offset, t_interval=s.t_interval,
                      theta_inc=s.theta_inc, theta_dec=s.theta_dec,
                      target_y_active=s.target_y_active,
                      target_y_inactive=s.target_y_inactive,
                      impulse=s.impulse,
                      hardware_faithful=cfg.precision == "hw")


def _fold_rows(reports) -> list[list]:
    rows = []
    for r in reports:
        rows.append([r.shots, r.fold, repr(r.train_accuracy), repr(r.test_accuracy),
                     r.soel_update_count, r.baseline_update_count,
                     r.windows_triggered, r.tie_count])
    return rows


def _write_fewshot_outputs(out_dir: Path, results: dict[int, "object"]) -> None:
    with open(out_dir / "folds.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["shots", "fold", "train_acc", "test_acc",
                         "soel_updates", "baseline_updates",
                         "windows_triggered", "ties"])
        for shots in sorted(results):
            writer.writerows(_fold_rows(results[shots].reports))
    with open(out_dir / "aggregate.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "shots", "train_mean", "train_std",
                         "test_mean", "test_std"])
        for shots in sorted(results):
            cv = results[shots]
            writer.writerow(["soel", shots, repr(cv.mean_train), repr(cv.std_train),
                             repr(cv.mean_test), repr(cv.std_test)])
    (out_dir / "table.txt").write_text(format_table(results))


def format_table(results: dict[int, "object"]) -> str:
    lines = [f"{'Method':<8} {'Shots':>5} {'Train':>16} {'Test':>16}"]
    for shots in sorted(results):
        cv = results[shots]
        train = f"{100 * cv.mean_train:.1f}+-{100 * cv.std_train:.1f}%"
        test = f"{100 * cv.mean_test:.1f}+-{100 * cv.std_test:.1f}%"
        lines.append(f"{'soel':<8} {shots:>5} {train:>16} {test:>16}")
    return "\n".join(lines) + "\n"


def cmd_fewshot(cfg: RunConfig, checkpoint: str, data_dir: str) -> int:
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out_dir, "fewshot")
    ckpt = Path(checkpoint)
    if not ckpt.exists():
        raise InvalidConfig(f"checkpoint {ckpt} does not exist")
    net = load_checkpoint(ckpt)
    data_root = Path(data_dir)
    dataset = manifest_dataset(data_root / "manifest.csv", data_root / "data")
    soel_cfg = _soel_config(cfg)

    results = {}
    for shots in cfg.fewshot.shots:
        episodes = build_episodes(dataset, cfg.fewshot.n_pretrain,
                                  cfg.fewshot.n_novel, shots,
                                  cfg.fewshot.folds, cfg.seed)
        results[shots] = cross_validate(net, episodes, soel_cfg, seed=cfg.seed)
        for rep in results[shots].reports:
            log_path = out_dir / f"windows_k{shots}_fold{rep.fold}.csv"
            log_path.write_text(window_log_csv(rep.window_log))
    _write_fewshot_outputs(out_dir, results)
    print(format_table(results), end="")
    return EXIT_OK


def cmd_infer(cfg: RunConfig, checkpoint: str, event_file: str) -> int:
    ckpt = Path(checkpoint)
    if not ckpt.exists():
        raise InvalidConfig(f"checkpoint {ckpt} does not exist")
    net = load_checkpoint(ckpt)
    stream = load_event_file(event_file, EventFormat.BIN_EVENTS)
    frames = bin_events(stream)
    record = run_network(net, frames)
    pred, tie = classify(record.output_counts)
    counts = ",".join(str(int(c)) for c in record.output_counts)
    print(f"class={pred} tie={int(tie)} counts={counts}")
    return EXIT_OK


def cmd_report(cfg: RunConfig, run_dir: str) -> int:
    src = Path(run_dir) / "folds.csv"
    if not src.exists():
        raise InvalidConfig(f"no folds.csv under {run_dir}")
    by_shots: dict[int, list[tuple[float, float]]] = {}
    with open(src, newline="") as fh:
        for row in csv.DictReader(fh):
            by_shots.setdefault(int(row["shots"]), []).append(
                (float(row["train_acc"]), float(row["test_acc"])))
    lines = [f"{'Method':<8} {'Shots':>5} {'Train':>16} {'Test':>16}"]
    for shots in sorted(by_shots):
        arr = np.array(by_shots[shots])
        tr = f"{100 * arr[:, 0].mean():.1f}+-{100 * arr[:, 0].std(ddof=1):.1f}%"
        te = f"{100 * arr[:, 1].mean():.1f}+-{100 * arr[:, 1].std(ddof=1):.1f}%"
        lines.append(f"{'soel':<8} {shots:>5} {tr:>16} {te:>16}")
    text = "\n".join(lines) + "\n"
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fewspike")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, help="global seed (mandatory here or in config)")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--jobs", type=int, help="worker cap (runs are single-process)")
    parser.add_argument("--precision", choices=["hw", "full"],
                        help="hw: fixed-point state, 7-bit traces; full: real-valued")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", help="generate a synthetic event dataset + manifest")
    p_train = sub.add_parser("pretrain", help="train the feature network offline")
    p_train.add_argument("--data", required=True, help="gen-data output directory")
    p_few = sub.add_parser("fewshot", help="few-shot episodes with online plasticity")
    p_few.add_argument("--checkpoint", required=True)
    p_few.add_argument("--data", required=True)
    p_inf = sub.add_parser("infer", help="classify one BIN event file")
    p_inf.add_argument("--checkpoint", required=True)
    p_inf.add_argument("--events", required=True)
    p_rep = sub.add_parser("report", help="aggregate fold results into a table")
    p_rep.add_argument("--run", required=True, help="fewshot output directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "pretrain":
            return cmd_pretrain(cfg, args.data)
        if args.command == "fewshot":
            return cmd_fewshot(cfg, args.checkpoint, args.data)
        if args.command == "infer":
            return cmd_infer(cfg, args.checkpoint, args.events)
        if args.command == "report":
            return cmd_report(cfg, args.run)
        raise InvalidConfig(f"unknown command {args.command!r}")
    except InvalidConfig as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergedLoss, Overflow) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ParseError, CheckpointError, EmptyDataset, InsufficientSamples,
            OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FewspikeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
