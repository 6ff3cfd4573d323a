"""Turning a trained landmark network (FAN) into an AU heatmap regressor."""
from __future__ import annotations

import copy
import hashlib

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import ConfigError, ConvBlock, Hourglass, HourglassNet, ModelBundle, NetworkSpec
from .codec import SIGMA0, STRIDE, argmax_points, encode_batch
from .topology import AUTopology, load_topology

MODES = ("scratch", "fine_tune", "adaptation_layers", "attention_maps", "reparametrisation",
         "random_backbone")
FROZEN_CORE_MODES = ("adaptation_layers", "attention_maps", "reparametrisation", "random_backbone")
# Width of the kernel-1 trunk; sized so the trainable head lands near 1.0M parameters.
TRUNK_CHANNELS = 304
FINE_TUNE_LR_SCALE = 0.1


def mode1_product(W, theta):
    """Contract ``W`` (C_out x C_out) with the first axis of ``theta``.

    ``out[o, i, h, w] = sum_p W[o, p] * theta[p, i, h, w]``. Accepts torch
    tensors or numpy arrays and returns the same kind.
    """
    as_numpy = isinstance(theta, np.ndarray) and isinstance(W, np.ndarray)
    Wt, th = torch.as_tensor(W), torch.as_tensor(theta)
    if Wt.ndim != 2 or th.ndim < 1 or Wt.shape[1] != th.shape[0]:
        raise ValueError(f"cannot contract W {tuple(Wt.shape)} with theta {tuple(th.shape)} on mode 1")
    out = torch.tensordot(Wt, th, dims=([1], [0]))
    return out.numpy() if as_numpy else out


class ReparamConv2d(nn.Module):
    """Conv whose weights are ``proj x_1 weight_fan`` with ``weight_fan`` frozen."""

    def __init__(self, conv: nn.Conv2d):
        super().__init__()
        if conv.weight.ndim != 4:
            raise ConfigError(f"expected a 4-D conv weight, got {tuple(conv.weight.shape)}")
        if conv.groups != 1:
            raise ConfigError("grouped convolutions cannot be reparametrised")
        self.stride, self.padding, self.dilation = conv.stride, conv.padding, conv.dilation
        self.weight_fan = nn.Parameter(conv.weight.detach().clone(), requires_grad=False)
        c_out = conv.out_channels
        self.proj = nn.Parameter(torch.eye(c_out, dtype=conv.weight.dtype))
        self.bias = None if conv.bias is None else nn.Parameter(conv.bias.detach().clone())

    def effective_weight(self):
        return mode1_product(self.proj, self.weight_fan)

    def forward(self, x):
        return F.conv2d(x, self.effective_weight(), self.bias, self.stride, self.padding, self.dilation)


def _replace_convs(module: nn.Module, skip: set[str], prefix: str = "") -> None:
    for name, child in module.named_children():
        path = f"{prefix}{name}"
        if path in skip:
            continue
        if isinstance(child, nn.Conv2d):
            setattr(module, name, ReparamConv2d(child))
        else:
            _replace_convs(child, skip, path + ".")


def core_conv_tensors(net: nn.Module):
    """(name, tensor) for every FAN conv weight except the output head, in module order."""
    for name, mod in net.named_modules():
        if name == "head" or name.endswith(".head"):
            continue
        if isinstance(mod, ReparamConv2d):
            yield name, mod.weight_fan
        elif isinstance(mod, nn.Conv2d):
            yield name, mod.weight


def core_checksum(net: nn.Module) -> str:
    """SHA-256 over the FAN trunk conv tensors (bit-level)."""
    if isinstance(net, ModelBundle):
        net = net.net
    if isinstance(net, AdaptationNet):
        net = net.fan
    h = hashlib.sha256()
    for name, t in core_conv_tensors(net):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _check_fan(fan: ModelBundle) -> HourglassNet:
    net = fan.net
    if not isinstance(net, HourglassNet) or net.spec.n_out != 68:
        raise ConfigError("source network must be a 68-output landmark hourglass")
    return net


def fine_tune_init(fan: ModelBundle, n_aus: int, lr_scale: float = FINE_TUNE_LR_SCALE) -> ModelBundle:
    if n_aus < 1:
        raise ConfigError(f"n_aus must be >= 1, got {n_aus}")
    net = copy.deepcopy(_check_fan(fan))
    net.replace_head(n_aus, zero_init=True)
    for p in net.parameters():
        p.requires_grad_(True)
    arch = {"kind": "hourglass", "spec": net.spec.to_dict(), "n_out": n_aus,
            "input_size": fan.arch.get("input_size")}
    meta = {"lr_scale": lr_scale, "source": fan.meta.get("path")}
    return ModelBundle(net=net, mode="fine_tune", arch=arch, meta=meta)


def _bn_relu_1x1(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class AdaptationNet(nn.Module):
    """Frozen FAN feeding a trainable kernel-1 hourglass head.

    conv4 features and either the FAN's 68 landmark heatmaps or AU attention
    maps derived from them pass through 1x1 conv + BN + ReLU branches to
    ``branch_channels``, are summed and decoded by the trunk.
    """

    def __init__(self, fan: HourglassNet, n_aus: int, heatmap_source: str = "fan_heatmaps",
                 topology: AUTopology | None = None, trunk_channels: int = TRUNK_CHANNELS,
                 branch_channels: int | None = None, depth: int | None = None,
                 sigma0: float = SIGMA0):
        super().__init__()
        if heatmap_source not in ("fan_heatmaps", "attention_maps"):
            raise ConfigError(f"unknown heatmap source {heatmap_source!r}")
        self.fan = fan
        for p in self.fan.parameters():
            p.requires_grad_(False)
        self.heatmap_source = heatmap_source
        self.sigma0 = sigma0
        feat_c = fan.spec.channels
        branch_c = branch_channels or feat_c
        if heatmap_source == "attention_maps":
            if topology is None or len(topology) != n_aus:
                raise ConfigError("attention maps need a topology with exactly n_aus AUs")
            m, mask = topology.cell_matrix()
            self.register_buffer("cell_weights", torch.tensor(m, dtype=torch.float32))
            self.register_buffer("cell_mask", torch.tensor(mask))
            hm_c = n_aus
        else:
            hm_c = fan.spec.n_out
        self.feature_branch = _bn_relu_1x1(feat_c, branch_c)
        self.heatmap_branch = _bn_relu_1x1(hm_c, branch_c)
        self.entry = None if trunk_channels == branch_c else ConvBlock(branch_c, trunk_channels, 1)
        self.hourglass = Hourglass(depth or fan.spec.depth, trunk_channels, 1)
        self.top = ConvBlock(trunk_channels, trunk_channels, 1)
        self.head = nn.Conv2d(trunk_channels, n_aus, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def train(self, mode: bool = True):
        super().train(mode)
        self.fan.eval()  # running statistics of the frozen core stay fixed
        return self

    def attention(self, fan_heatmaps: torch.Tensor, image_size: tuple[int, int]) -> torch.Tensor:
        lmk = argmax_points(fan_heatmaps)
        pts = torch.einsum("nkl,bld->bnkd", self.cell_weights, lmk)
        ones = torch.ones(pts.shape[:2], dtype=pts.dtype, device=pts.device)
        h, w = fan_heatmaps.shape[-2:]
        return encode_batch(pts, ones, (h, w), mask=self.cell_mask, sigma0=self.sigma0)

    def forward(self, x, return_taps: bool = False):
        with torch.no_grad():
            fan_hm, taps = self.fan(x, return_taps=True)
            f4 = taps["conv4_features"]
            if self.heatmap_source == "attention_maps":
                hm = self.attention(fan_hm, x.shape[-2:])
            else:
                hm = fan_hm
        z = self.feature_branch(f4) + self.heatmap_branch(hm)
        if self.entry is not None:
            z = self.entry(z)
        out = self.head(self.top(self.hourglass(z)))
        if return_taps:
            return out, {"conv4_features": f4, "fan_heatmaps": fan_hm, "branch_heatmaps": hm}
        return out


def build_adaptation(fan: ModelBundle, n_aus: int, heatmap_source: str = "fan_heatmaps",
                     topology: AUTopology | None = None, trunk_channels: int = TRUNK_CHANNELS,
                     mode: str | None = None, depth: int | None = None) -> ModelBundle:
    fan_net = copy.deepcopy(_check_fan(fan))
    if n_aus < 1:
        raise ConfigError(f"n_aus must be >= 1, got {n_aus}")
    if mode is None:
        mode = "attention_maps" if heatmap_source == "attention_maps" else "adaptation_layers"
    net = AdaptationNet(fan_net, n_aus, heatmap_source, topology, trunk_channels, depth=depth)
    arch = {
        "kind": "adaptation",
        "fan": fan.arch,
        "n_out": n_aus,
        "heatmap_source": heatmap_source,
        "trunk_channels": trunk_channels,
        "depth": net.hourglass.depth,
        "topology": topology.to_text() if topology is not None else None,
        "input_size": fan.arch.get("input_size"),
    }
    meta = {"source": fan.meta.get("path"), "frozen_checksum": core_checksum(fan_net)}
    return ModelBundle(net=net, mode=mode, arch=arch, meta=meta)


def random_backbone(spec: NetworkSpec, n_aus: int, seed: int, trunk_channels: int = TRUNK_CHANNELS,
                    input_size: int | None = None, depth: int | None = None) -> ModelBundle:
    """Adaptation-layer wiring over a seed-initialised, permanently frozen FAN."""
    from .backbone import build_network

    fan = build_network(NetworkSpec(**{**spec.to_dict(), "n_out": 68}), seed=seed, mode="fan")
    fan.arch["input_size"] = input_size
    return build_adaptation(fan, n_aus, "fan_heatmaps", trunk_channels=trunk_channels,
                            mode="random_backbone", depth=depth)


def reparametrise(fan: ModelBundle, n_aus: int, keep_fan_head: bool = False) -> ModelBundle:
    """Freeze every FAN conv and learn a C_out x C_out projection per layer.

    The projections start at identity. The 68-output head is replaced by a fresh,
    fully trainable N_aus layer unless ``keep_fan_head`` (used for identity checks),
    in which case the head is reparametrised like every other conv.
    """
    net = copy.deepcopy(_check_fan(fan))
    if keep_fan_head:
        _replace_convs(net, skip=set())
        n_out = 68
    else:
        if n_aus < 1:
            raise ConfigError(f"n_aus must be >= 1, got {n_aus}")
        _replace_convs(net, skip={"head"})
        net.replace_head(n_aus, zero_init=True)
        n_out = n_aus
    for mod in net.modules():
        if isinstance(mod, nn.BatchNorm2d):
            for p in mod.parameters():
                p.requires_grad_(True)
    arch = {"kind": "reparam", "spec": {**fan.arch["spec"], "n_out": 68}, "n_out": n_out,
            "keep_fan_head": keep_fan_head, "input_size": fan.arch.get("input_size")}
    meta = {"source": fan.meta.get("path"), "frozen_checksum": core_checksum(net)}
    return ModelBundle(net=net, mode="reparametrisation", arch=arch, meta=meta)


def build_transfer(mode: str, fan: ModelBundle | None, n_aus: int, *, spec: NetworkSpec | None = None,
                   topology: AUTopology | None = None, seed: int = 0,
                   trunk_channels: int = TRUNK_CHANNELS, input_size: int | None = None,
                   lr_scale: float = FINE_TUNE_LR_SCALE) -> ModelBundle:
    """Dispatch on a transfer mode name."""
    from .backbone import build_network

    if mode not in MODES:
        raise ConfigError(f"unknown transfer mode {mode!r}; choose from {MODES}")
    if mode == "scratch":
        spec = spec or (NetworkSpec(**{**fan.arch["spec"]}) if fan else NetworkSpec())
        bundle = build_network(NetworkSpec(**{**spec.to_dict(), "n_out": n_aus}), seed=seed)
        bundle.arch["input_size"] = input_size
        return bundle
    if mode == "random_backbone":
        spec = spec or (NetworkSpec(**fan.arch["spec"]) if fan else NetworkSpec())
        return random_backbone(spec, n_aus, seed, trunk_channels, input_size)
    if fan is None:
        raise ConfigError(f"mode {mode!r} needs a trained FAN checkpoint")
    if mode == "fine_tune":
        return fine_tune_init(fan, n_aus, lr_scale)
    if mode == "reparametrisation":
        return reparametrise(fan, n_aus)
    source = "attention_maps" if mode == "attention_maps" else "fan_heatmaps"
    if source == "attention_maps" and topology is None:
        raise ConfigError("attention maps need the active AU topology")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return build_adaptation(fan, n_aus, source, topology, trunk_channels)


def default_topology(au_ids) -> AUTopology:
    return load_topology(au_ids=au_ids)
