"""Versioned checkpoint container for :class:`ModelBundle`."""
from __future__ import annotations

from pathlib import Path

import torch

from .backbone import NORM_MEAN, NORM_STD, HourglassNet, ModelBundle, NetworkSpec
from .topology import load_topology, parse_table, AUTopology, LANDMARK_SYMMETRY

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def topology_hash(arch: dict) -> str | None:
    if arch.get("topology"):
        return AUTopology(tuple(parse_table(arch["topology"])), LANDMARK_SYMMETRY).digest()
    if arch.get("au_ids"):
        return load_topology(au_ids=arch["au_ids"]).digest()
    return None


def rebuild(arch: dict) -> torch.nn.Module:
    """Construct an untrained module matching an architecture descriptor."""
    from .transfer import AdaptationNet, _replace_convs

    kind = arch.get("kind")
    if kind == "hourglass":
        return HourglassNet(NetworkSpec(**arch["spec"]))
    if kind == "reparam":
        net = HourglassNet(NetworkSpec(**{**arch["spec"], "n_out": 68}))
        if arch.get("keep_fan_head"):
            _replace_convs(net, skip=set())
        else:
            _replace_convs(net, skip={"head"})
            net.replace_head(arch["n_out"])
        return net
    if kind == "adaptation":
        fan = rebuild(arch["fan"])
        topo = None
        if arch.get("topology"):
            topo = AUTopology(tuple(parse_table(arch["topology"])), LANDMARK_SYMMETRY)
        return AdaptationNet(fan, arch["n_out"], arch["heatmap_source"], topo,
                             arch["trunk_channels"], depth=arch.get("depth"))
    raise CheckpointError(f"unknown architecture kind {kind!r}")


def save(model: ModelBundle, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": FORMAT_VERSION,
        "mode": model.mode,
        "arch": model.arch,
        "state_dict": {k: v.detach().cpu() for k, v in model.net.state_dict().items()},
        "norm_mean": list(NORM_MEAN),
        "norm_std": list(NORM_STD),
        "topology_hash": topology_hash(model.arch),
        "meta": model.meta,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load(path) -> ModelBundle:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a variety of unpickling errors
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format {payload.get('format')!r}")
    if tuple(payload["norm_mean"]) != NORM_MEAN or tuple(payload["norm_std"]) != NORM_STD:
        raise CheckpointError(f"{path}: input normalisation differs from this build")
    net = rebuild(payload["arch"])
    net.load_state_dict(payload["state_dict"])
    net.eval()
    meta = dict(payload.get("meta") or {})
    meta["path"] = str(path)
    meta["topology_hash"] = payload.get("topology_hash")
    return ModelBundle(net=net, mode=payload["mode"], arch=payload["arch"], meta=meta)
