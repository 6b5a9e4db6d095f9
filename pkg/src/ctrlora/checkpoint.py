"""Single-file, version-tagged checkpoints of a network, its adapters and training state."""
from __future__ import annotations

import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .archive import read_arrays, write_arrays
from .curvature import CurvatureProxy, proxies_from_arrays, proxy_arrays
from .model import AdapterPair, ArchSpec, BaseNetwork, LayerSpec
from .scheduler import BudgetPlan
from .trainer import OptimizerState, TrainState

CHECKPOINT_SCHEMA = "ctrlora-checkpoint/1"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    network: BaseNetwork
    adapters: dict[int, AdapterPair] = field(default_factory=dict)
    plan: BudgetPlan | None = None
    proxies: dict[int, CurvatureProxy] = field(default_factory=dict)
    optimizer: OptimizerState | None = None
    step: int = 0
    initial_loss: float | None = None
    rng: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def train_state(self) -> TrainState:
        if self.plan is None or self.optimizer is None or self.initial_loss is None:
            raise CheckpointError("checkpoint does not hold a resumable training state")
        return TrainState(self.adapters, self.optimizer, self.proxies, self.plan, self.step, self.initial_loss)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    net = ckpt.network
    arrays: dict[str, np.ndarray] = {}
    layers = []
    for i, layer in enumerate(net.layers):
        arrays[f"layer_{i}_w"] = layer.weight
        arrays[f"layer_{i}_b"] = layer.bias
        layers.append({"name": layer.name, "nonlinearity": layer.nonlinearity,
                       "adapter_eligible": layer.adapter_eligible})
    for i, ad in ckpt.adapters.items():
        arrays[f"adapter_{i}_a"] = ad.a_factor
        arrays[f"adapter_{i}_b"] = ad.b_factor
    proxy_meta, proxy_arr = proxy_arrays(ckpt.proxies)
    arrays.update(proxy_arr)
    opt = None
    if ckpt.optimizer is not None:
        o = ckpt.optimizer
        opt = {"step": o.step, "beta1": o.beta1, "beta2": o.beta2, "eps": o.eps,
               "keys": [[k[0], k[1]] for k in sorted(o.m)]}
        for (i, name) in o.m:
            arrays[f"opt_m_{i}_{name}"] = o.m[(i, name)]
            arrays[f"opt_v_{i}_{name}"] = o.v[(i, name)]
    header = {
        "schema": CHECKPOINT_SCHEMA,
        "arch": net.arch.to_dict(),
        "layers": layers,
        "adapters": sorted(ckpt.adapters),
        "plan": ckpt.plan.to_dict() if ckpt.plan is not None else None,
        "proxies": proxy_meta,
        "optimizer": opt,
        "step": ckpt.step,
        "initial_loss": ckpt.initial_loss,
        "rng": ckpt.rng,
        "config": ckpt.config,
    }
    write_arrays(path, arrays, header)


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        header, arrays = read_arrays(path)
    except (zipfile.BadZipFile, KeyError, OSError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if header.get("schema") != CHECKPOINT_SCHEMA:
        raise CheckpointError(f"unsupported checkpoint schema {header.get('schema')!r}")
    arch = ArchSpec(**header["arch"])
    layers = [
        LayerSpec(m["name"], arrays[f"layer_{i}_w"], arrays[f"layer_{i}_b"], m["nonlinearity"], m["adapter_eligible"])
        for i, m in enumerate(header["layers"])
    ]
    adapters = {
        int(i): AdapterPair(int(i), arrays[f"adapter_{i}_a"], arrays[f"adapter_{i}_b"])
        for i in header["adapters"]
    }
    opt = None
    if header["optimizer"] is not None:
        o = header["optimizer"]
        opt = OptimizerState(step=o["step"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"])
        for i, name in o["keys"]:
            opt.m[(int(i), name)] = arrays[f"opt_m_{i}_{name}"]
            opt.v[(int(i), name)] = arrays[f"opt_v_{i}_{name}"]
    plan = BudgetPlan.from_dict(header["plan"]) if header["plan"] is not None else None
    return Checkpoint(
        BaseNetwork(arch, layers),
        adapters,
        plan,
        proxies_from_arrays(header["proxies"], arrays),
        opt,
        header["step"],
        header["initial_loss"],
        header["rng"],
        header["config"],
    )
