"""Toy-scale synthetic benchmark: FAN pretraining then scratch / fine-tune / adaptation."""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import NetworkSpec, build_network
from .metrics import MetricsReport, format_table, report
from .synth import FrameSample, synth_samples
from .topology import DEFAULT_AUS, load_topology
from .training import AugmentationConfig, TrainConfig, infer, predict_trace, train
from .transfer import build_transfer

log = logging.getLogger(__name__)

VARIANTS = ("scratch", "fine_tune", "adaptation_layers")


@dataclass
class BenchmarkConfig:
    n_train: int = 2000
    n_test: int = 500
    au_ids: tuple[int, ...] = DEFAULT_AUS
    image_size: int = 128
    yaw_range: float = 40.0
    seed: int = 0
    fan_epochs: int = 5
    au_epochs: int = 10
    stem_channels: int = 32
    channels: int = 64
    depth: int = 4
    trunk_channels: int = 128
    batch_size: int = 8
    fan_lr: float = 1e-3
    fan_sigma: float = 2.0
    au_lr: float = 1e-3
    fine_tune_lr_scale: float = 0.1
    schedule: str = "cosine_restarts"
    aug: AugmentationConfig = field(default_factory=AugmentationConfig)
    variants: tuple[str, ...] = VARIANTS

    def spec(self, n_out: int) -> NetworkSpec:
        return NetworkSpec(n_out=n_out, stem_channels=self.stem_channels, channels=self.channels,
                           depth=self.depth)

    def train_config(self, epochs: int, lr: float) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, base_lr=lr, epochs=epochs, seed=self.seed,
                           schedule=self.schedule, input_size=self.image_size,
                           fan_sigma=self.fan_sigma, aug=dataclasses.replace(self.aug))


@dataclass
class BenchmarkResult:
    reports: dict[str, MetricsReport]
    seconds: dict[str, float]
    fan_final_loss: float | None = None
    models: dict = field(default_factory=dict)

    def icc(self, variant: str) -> float | None:
        return self.reports[variant].avg_icc

    def table(self) -> str:
        return format_table(list(self.reports.values()))

    def to_dict(self) -> dict:
        return {"reports": {k: r.to_dict() for k, r in self.reports.items()},
                "seconds": self.seconds, "fan_final_loss": self.fan_final_loss}


def make_splits(cfg: BenchmarkConfig) -> tuple[list[FrameSample], list[FrameSample]]:
    n = cfg.n_train + cfg.n_test
    pairs = synth_samples(n, cfg.au_ids, cfg.seed, size=cfg.image_size, yaw_range=cfg.yaw_range,
                          fractions=(cfg.n_train / n, 0.0, cfg.n_test / n))
    train_set = [s for split, s in pairs if split == "train"]
    test_set = [s for split, s in pairs if split == "test"]
    return train_set, test_set


def run_benchmark(cfg: BenchmarkConfig, out_dir=None, data=None, keep_models: bool = False) -> BenchmarkResult:
    """Pretrain a FAN on synthetic landmarks, then train and score each AU variant."""
    out = Path(out_dir) if out_dir is not None else None
    t0 = time.time()
    train_set, test_set = data if data is not None else make_splits(cfg)
    seconds = {"data": time.time() - t0}
    topology = load_topology(au_ids=cfg.au_ids)

    fan = None
    if any(v != "scratch" for v in cfg.variants):
        t0 = time.time()
        fan = build_network(cfg.spec(68), seed=cfg.seed, mode="fan")
        fan.arch["input_size"] = cfg.image_size
        fan, run = train(fan, train_set, cfg.train_config(cfg.fan_epochs, cfg.fan_lr),
                         out_dir=out / "fan" if out else None)
        seconds["fan"] = time.time() - t0
        fan_loss = run["final_loss"]
    else:
        fan_loss = None

    reports, models = {}, {}
    for variant in cfg.variants:
        t0 = time.time()
        model = build_transfer(variant, fan, len(cfg.au_ids), spec=cfg.spec(len(cfg.au_ids)),
                               topology=topology, seed=cfg.seed + 1, trunk_channels=cfg.trunk_channels,
                               input_size=cfg.image_size, lr_scale=cfg.fine_tune_lr_scale)
        model.arch["au_ids"] = list(cfg.au_ids)
        model, _ = train(model, train_set, cfg.train_config(cfg.au_epochs, cfg.au_lr),
                         out_dir=out / variant if out else None, topology=topology)
        trace = predict_trace(model, test_set)
        reports[variant] = report(trace, name=variant)
        seconds[variant] = time.time() - t0
        if keep_models:
            models[variant] = model
        log.info("%s: avg ICC %s (%.0fs)", variant, reports[variant].avg_icc, seconds[variant])
        if out is not None:
            (out / variant / "trace.csv").write_text(trace.to_csv())
            (out / variant / "report.csv").write_text(reports[variant].to_csv())
    result = BenchmarkResult(reports, seconds, fan_loss, models)
    if out is not None:
        (out / "benchmark.json").write_text(json.dumps(
            {"config": dataclasses.asdict(cfg), **result.to_dict()}, indent=2, default=str))
        (out / "table.txt").write_text(result.table() + "\n")
    return result


def overfit_one_sample(sample: FrameSample, steps: int = 50, lr: float = 1e-3, seed: int = 0,
                       spec: NetworkSpec | None = None) -> list[float]:
    """Loss curve of a tiny scratch model trained on one repeated, unaugmented frame."""
    if not np.any(sample.label):
        raise ValueError("overfit check needs a frame with at least one active AU")
    spec = spec or NetworkSpec(n_out=len(sample.au_ids), stem_channels=16, channels=32, depth=2)
    model = build_network(spec, seed=seed)
    cfg = TrainConfig(batch_size=1, base_lr=lr, epochs=steps, seed=seed, schedule="cosine",
                      schedule_period=steps, aug=AugmentationConfig(enabled=False))
    model, _ = train(model, [sample], cfg)
    return model.meta["losses"]


def planted_check(model, cfg: BenchmarkConfig, au: int = 12, level: float = 4.0, seed: int = 12345):
    """Decode one fresh frame with ``au`` planted at ``level``; returns (decoded, truth)."""
    from .synth import Identity, SynthFaceParams, synth_frame

    rng = np.random.default_rng(seed)
    params = SynthFaceParams(au={a: (level if a == au else 0.0) for a in cfg.au_ids},
                             identity=Identity.sample(rng), size=cfg.image_size)
    s = synth_frame(params, rng, cfg.au_ids)
    return infer(model, s.image), s.label


def main(argv=None) -> None:
    import argparse

    p = argparse.ArgumentParser(description="toy-scale synthetic transfer benchmark")
    for f in dataclasses.fields(BenchmarkConfig):
        if f.name in ("aug", "au_ids", "variants"):
            continue
        p.add_argument(f"--{f.name.replace('_', '-')}", type=type(f.default), default=f.default)
    p.add_argument("--aus", default=",".join(map(str, DEFAULT_AUS)))
    p.add_argument("--variants", default=",".join(VARIANTS))
    p.add_argument("--no-aug", action="store_true")
    p.add_argument("--out", default="runs/benchmark")
    args = vars(p.parse_args(argv))
    out = args.pop("out")
    aus = tuple(int(a) for a in args.pop("aus").split(","))
    variants = tuple(args.pop("variants").split(","))
    aug = AugmentationConfig(enabled=not args.pop("no_aug"))
    cfg = BenchmarkConfig(au_ids=aus, variants=variants, aug=aug, **args)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.manual_seed(cfg.seed)
    res = run_benchmark(cfg, out)
    print(res.table())
    print(json.dumps(res.seconds, indent=1))


if __name__ == "__main__":
    main()
