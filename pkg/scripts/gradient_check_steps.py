"""Relative error of central differences vs autograd on the tiny backbone, per step size.

ReLU and max-pool kinks make large steps straddle non-differentiable points;
this prints how the worst-case error depends on the step.
"""
import argparse
import sys
from pathlib import Path

import torch

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))  # for tests.oracles

from auheat.backbone import NetworkSpec, build_network
from tests.oracles import gradient_check


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--steps", default="1e-2,1e-3,1e-4,1e-5,1e-6")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--train-mode", action="store_true", help="batch statistics instead of running ones")
    args = p.parse_args(argv)
    for seed in range(args.seeds):
        torch.manual_seed(seed)
        net = build_network(NetworkSpec(n_out=3, stem_channels=8, channels=8, depth=1), seed=seed,
                            zero_head=False).net.double()
        net.train(args.train_mode)
        x = torch.randn(2, 3, 32, 32, dtype=torch.float64)
        target = torch.rand(2, 3, 8, 8, dtype=torch.float64)
        for step in map(float, args.steps.split(",")):
            worst, rec = gradient_check(net, x, target, n_params=100, step=step, seed=seed)
            bad = sum(r[-1] > 1e-3 for r in rec)
            print(f"seed {seed} step {step:.0e}: max rel err {worst:.3g}, {bad}/100 above 1e-3")


if __name__ == "__main__":
    main()
