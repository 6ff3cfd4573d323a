"""Command-line entry points: synth-gen, pretrain-fan, train, eval, infer, export-heatmaps."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .backbone import ConfigError, ModelBundle, NetworkSpec, build_network
from .checkpoint import CheckpointError, load, save
from .codec import overlay, write_stack
from .config import RunConfig, config_fields, dump_config, load_config
from .metrics import PredictionTrace, report
from .synth import FrameSample, load_real, read_image, synth_dataset, write_image
from .topology import load_topology
from .training import (FrozenCoreViolation, TrainingDiverged, code_identifier, infer,
                       predict_heatmaps, predict_trace, train)
from .transfer import build_transfer, core_checksum

log = logging.getLogger("auheat")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_MODE_MISMATCH = 4
EXIT_CONFIG = 5
EXIT_DIVERGED = 6
EXIT_FROZEN = 7

CLI_MODES = {
    "scratch": "scratch",
    "fine-tune": "fine_tune",
    "adaptation": "adaptation_layers",
    "attention": "attention_maps",
    "reparam": "reparametrisation",
    "random-backbone": "random_backbone",
}


class ModeMismatch(RuntimeError):
    pass


def _flag(key: str) -> str:
    section, name = key.split(".", 1)
    name = name.replace("_", "-")
    return f"--{name}" if section in ("train", "model") else f"--{section}-{name}"


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'section.key = value' config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--device")


def _add_run_fields(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config fields (override --config)")
    g.add_argument("--lr", dest="train.base_lr", metavar="FLOAT", help="alias of --base-lr")
    g.add_argument("--aus", dest="data.aus", metavar="LIST", help="comma-separated AU ids")
    for key, default in config_fields():
        if key in ("train.seed", "train.device", "data.aus"):
            continue
        g.add_argument(_flag(key), dest=key, metavar="V", help=f"{key} (default {default})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="auheat", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="render a synthetic dataset")
    _add_common(p)
    _add_run_fields(p)

    p = sub.add_parser("pretrain-fan", help="train a 68-landmark network on a manifest")
    _add_common(p)
    p.add_argument("--data", required=True, help="manifest.csv")
    _add_run_fields(p)

    p = sub.add_parser("train", help="train an AU model with one of the transfer modes")
    _add_common(p)
    p.add_argument("--mode", required=True, choices=sorted(CLI_MODES))
    p.add_argument("--data", required=True, help="manifest.csv")
    p.add_argument("--fan-checkpoint", help="pretrained FAN checkpoint")
    p.add_argument("--unfreeze-epochs", type=int, default=0,
                   help="after a frozen-core run, fine-tune everything for this many epochs "
                        "at a tenth of the learning rate (reported as giving no gain)")
    _add_run_fields(p)

    p = sub.add_parser("eval", help="score a checkpoint on a split, or score a saved trace")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="manifest.csv")
    p.add_argument("--trace", help="prediction trace CSV (pred_au*/true_au* columns)")
    p.add_argument("--error", choices=("MSE", "RMSE"), default="MSE")
    _add_run_fields(p)

    p = sub.add_parser("infer", help="decode AU intensities and locations for one image")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)

    p = sub.add_parser("export-heatmaps", help="write heatmap overlays and raw stacks")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", action="append", default=[], help="image file (repeatable)")
    p.add_argument("--data", help="manifest.csv; exports --limit frames of --data-eval-split")
    p.add_argument("--limit", type=int, default=8)
    p.add_argument("--alpha", type=float, default=0.5)
    _add_run_fields(p)
    return parser


def _merged_config(args) -> RunConfig:
    overrides = {k: v for k, v in vars(args).items() if "." in k}
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = args.seed
    if getattr(args, "device", None) is not None:
        overrides["train.device"] = args.device
    return load_config(args.config, overrides)


def _out_dir(args) -> Path:
    out = Path(args.out) if args.out else Path("runs") / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_command_manifest(out: Path, args, cfg: RunConfig | None, extra: dict | None = None) -> None:
    doc = {
        "command": args.command,
        "argv": sys.argv[1:],
        "code": code_identifier(),
        "time": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "config": cfg.flat() if cfg is not None else None,
    }
    doc.update(extra or {})
    (out / f"{args.command}_manifest.json").write_text(json.dumps(doc, indent=2, default=str))
    if cfg is not None:
        (out / "config.txt").write_text(dump_config(cfg))


def _load_split(manifest: str, split: str) -> list[FrameSample]:
    samples, stats = load_real(manifest, split=split or None)
    if stats.skipped or stats.clipped:
        log.warning("%s: %d frames skipped, %d labels clipped", manifest, stats.skipped, stats.clipped)
    if not samples:
        raise ConfigError(f"{manifest}: no frames in split {split!r}")
    return samples


def _spec(cfg: RunConfig, n_out: int) -> NetworkSpec:
    m = cfg.model
    return NetworkSpec(n_out=n_out, stem_channels=m.stem_channels, channels=m.channels, depth=m.depth)


def cmd_synth_gen(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    d = cfg.data
    man = synth_dataset(d.n_frames, d.aus, cfg.train.seed, out, size=d.size, yaw_range=d.yaw_range)
    _write_command_manifest(out, args, cfg, {"frames": len(man.rows), "manifest": str(man.path)})
    print(man.path)
    return EXIT_OK


def cmd_pretrain_fan(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    samples = _load_split(args.data, cfg.data.split)
    fan = build_network(_spec(cfg, 68), seed=cfg.train.seed, mode="fan")
    fan, run = train(fan, samples, cfg.train, out_dir=out)
    _write_command_manifest(out, args, cfg, {"run": run})
    print(out / "final.pt")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    mode = CLI_MODES[args.mode]
    samples = _load_split(args.data, cfg.data.split)
    au_ids = samples[0].au_ids
    fan = None
    if args.fan_checkpoint:
        fan = load(args.fan_checkpoint)
        if fan.mode != "fan" or fan.n_out != 68:
            raise ModeMismatch(f"{args.fan_checkpoint} holds a {fan.mode!r} model, not a 68-landmark FAN")
    elif mode not in ("scratch", "random_backbone"):
        raise ModeMismatch(f"--mode {args.mode} needs --fan-checkpoint")
    topology = load_topology(au_ids=au_ids)
    model = build_transfer(mode, fan, len(au_ids), spec=_spec(cfg, len(au_ids)), topology=topology,
                           seed=cfg.train.seed, trunk_channels=cfg.model.trunk_channels,
                           input_size=cfg.train.input_size or samples[0].image.shape[0])
    model.arch["au_ids"] = list(au_ids)
    model, run = train(model, samples, cfg.train, out_dir=out, topology=topology)
    extra = {"run": run, "frozen_checksum": model.meta.get("frozen_checksum"),
             "fan_checksum": core_checksum(fan.net) if fan is not None else None}
    if args.unfreeze_epochs > 0:
        for p in model.net.parameters():
            p.requires_grad_(True)
        model.mode = f"{model.mode}+unfrozen"
        model.meta["lr_scale"] = float(model.meta.get("lr_scale", 1.0)) * 0.1
        phase2 = dataclasses.replace(cfg.train, epochs=args.unfreeze_epochs)
        model, run2 = train(model, samples, phase2, out_dir=out / "unfrozen", topology=topology)
        save(model, out / "final.pt")
        extra["unfrozen_run"] = run2
    _write_command_manifest(out, args, cfg, extra)
    print(out / "final.pt")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    if args.trace:
        path = Path(args.trace)
        if not path.is_file():
            raise FileNotFoundError(f"trace not found: {path}")
        trace = PredictionTrace.from_csv(path.read_text())
        name = path.stem
    else:
        if not args.checkpoint or not args.data:
            raise ConfigError("eval needs --trace, or both --checkpoint and --data")
        model = load(args.checkpoint)
        if model.mode == "fan":
            raise ModeMismatch(f"{args.checkpoint} is a landmark FAN; eval scores AU models")
        trace = predict_trace(model, _load_split(args.data, cfg.data.eval_split))
        name = model.mode
    out = _out_dir(args)
    if not args.trace:
        (out / "trace.csv").write_text(trace.to_csv())
    rep = report(trace, name=name)
    (out / "report.csv").write_text(rep.to_csv())
    (out / "report.json").write_text(rep.to_json())
    table = rep.to_table(error=args.error)
    (out / "report.txt").write_text(table + "\n")
    _write_command_manifest(out, args, cfg, {"report": rep.to_dict()})
    print(table)
    return EXIT_OK


def _load_au_model(path: str) -> ModelBundle:
    model = load(path)
    if model.mode == "fan":
        raise ModeMismatch(f"{path} is a landmark FAN, not an AU model")
    return model


def cmd_infer(args, cfg) -> int:
    model = _load_au_model(args.checkpoint)
    if not Path(args.image).is_file():
        raise FileNotFoundError(f"image not found: {args.image}")
    dec = infer(model, args.image)
    text = json.dumps(dec.as_dict(), indent=2)
    out = _out_dir(args)
    (out / "decoded.json").write_text(text + "\n")
    _write_command_manifest(out, args, None, {"checkpoint": args.checkpoint, "image": args.image})
    print(text)
    return EXIT_OK


def cmd_export(args, cfg: RunConfig) -> int:
    model = _load_au_model(args.checkpoint)
    out = _out_dir(args)
    frames: list[tuple[str, np.ndarray]] = []
    for p in args.image:
        if not Path(p).is_file():
            raise FileNotFoundError(f"image not found: {p}")
        frames.append((Path(p).stem, read_image(p)))
    if args.data:
        for s in _load_split(args.data, cfg.data.eval_split)[: args.limit]:
            frames.append((s.id, s.image))
    if not frames:
        raise ConfigError("export-heatmaps needs --image or --data")
    size = model.arch.get("input_size") or 256
    from .training import square_crop_resize

    for name, img in frames:
        hm = predict_heatmaps(model, [img])[0].numpy()
        write_image(out / f"{name}_overlay.png", overlay(square_crop_resize(img, size), hm, args.alpha))
        write_stack(out / f"{name}.auhm", hm)
    _write_command_manifest(out, args, cfg, {"frames": [n for n, _ in frames]})
    print(out)
    return EXIT_OK


COMMANDS = {
    "synth-gen": cmd_synth_gen,
    "pretrain-fan": cmd_pretrain_fan,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "export-heatmaps": cmd_export,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: --help exits 0, errors exit 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = None if args.command == "infer" else _merged_config(args)
        return COMMANDS[args.command](args, cfg)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ModeMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MODE_MISMATCH
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except FrozenCoreViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FROZEN
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
