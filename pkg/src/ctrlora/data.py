"""Planted low-rank tasks and deterministic splitting."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .archive import read_arrays, write_arrays
from .linalg import make_rng
from .model import AdapterPair, BaseNetwork, Batch, ShapeError, predict

DATASET_SCHEMA = "ctrlora-dataset/1"


class SplitError(ValueError):
    pass


@dataclass
class PlantedSpec:
    """Per-layer planted perturbation ``Delta W* = sum_i s_i u_i v_i^T``.

    ``ranks[l]`` is the planted rank and ``scales[l]`` the leading singular value;
    successive singular values are multiplied by ``decay``.
    """

    ranks: dict[int, int] = field(default_factory=dict)
    scales: dict[int, float] = field(default_factory=dict)
    decay: float = 1.0
    noise: float = 0.0
    n_samples: int = 1000
    input_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.ranks = {int(k): int(v) for k, v in self.ranks.items()}
        self.scales = {int(k): float(v) for k, v in self.scales.items()}

    def singular_values(self, layer_id: int) -> np.ndarray:
        r = self.ranks.get(layer_id, 0)
        return self.scales.get(layer_id, 0.0) * self.decay ** np.arange(r)


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    task_kind: str
    train_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    eval_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    calib_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    planted: dict[int, AdapterPair] = field(default_factory=dict)
    trivial: bool = False

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def batch(self, idx) -> Batch:
        idx = np.asarray(idx, dtype=np.int64)
        return Batch(self.inputs[idx], self.targets[idx])

    def train_set(self) -> Batch:
        return self.batch(self.train_idx)

    def eval_set(self) -> Batch:
        return self.batch(self.eval_idx)

    def calibration_batches(self, batch_size: int | None = None) -> list[Batch]:
        idx = self.calib_idx
        if batch_size is None or batch_size >= len(idx):
            return [self.batch(idx)]
        return [self.batch(idx[i : i + batch_size]) for i in range(0, len(idx), batch_size)]


def planted_deltas(network: BaseNetwork, spec: PlantedSpec) -> dict[int, AdapterPair]:
    """Teacher perturbations as exact adapter factors (``A = U diag(s)``, ``B = V``)."""
    deltas = {}
    for layer_id in sorted(spec.ranks):
        r = spec.ranks[layer_id]
        if layer_id not in network.eligible_ids():
            raise ShapeError(f"layer {layer_id} is not adapter-eligible")
        d_out, d_in = network.shape(layer_id)
        if r < 0 or r > min(d_in, d_out):
            raise ShapeError(f"planted rank {r} exceeds dims of layer {layer_id}")
        if spec.scales.get(layer_id, 0.0) < 0:
            raise ShapeError("planted magnitudes must be non-negative")
        rng = make_rng([spec.seed, 0x7EAC, layer_id])
        u, _ = np.linalg.qr(rng.standard_normal((d_out, r)))
        v, _ = np.linalg.qr(rng.standard_normal((d_in, r)))
        deltas[layer_id] = AdapterPair(layer_id, u * spec.singular_values(layer_id), v)
    return deltas


def gen_planted_task(network: BaseNetwork, spec: PlantedSpec) -> Dataset:
    """Label inputs with a teacher equal to ``network`` plus planted low-rank perturbations."""
    deltas = planted_deltas(network, spec)
    rng = make_rng([spec.seed, 0xDA7A])
    x = spec.input_scale * rng.standard_normal((spec.n_samples, network.arch.input_dim))
    out = predict(network, deltas, x)
    if network.arch.task == "classification":
        y = np.argmax(out, axis=1).astype(np.int64)
    else:
        y = out + spec.noise * rng.standard_normal(out.shape)
    trivial = all(spec.scales.get(k, 0.0) == 0.0 or r == 0 for k, r in spec.ranks.items())
    if trivial:
        warnings.warn("planted spec has no non-zero perturbation; task is trivial", stacklevel=2)
    return Dataset(x, y, network.arch.task, planted=deltas, trivial=trivial)


def split(dataset: Dataset, calibration_size: int, eval_fraction: float, seed: int = 0) -> Dataset:
    n = len(dataset)
    if calibration_size < 1:
        raise SplitError("calibration set needs at least one sample")
    if not 0.0 <= eval_fraction < 1.0:
        raise SplitError("eval_fraction must be in [0, 1)")
    n_eval = int(round(eval_fraction * n))
    n_train = n - n_eval
    if calibration_size > n_train:
        raise SplitError(f"calibration_size {calibration_size} exceeds train size {n_train}")
    perm = make_rng([seed, 0x5917]).permutation(n)
    train = np.sort(perm[:n_train])
    evals = np.sort(perm[n_train:])
    calib = np.sort(train[make_rng([seed, 0xCA1B]).permutation(n_train)[:calibration_size]])
    return Dataset(
        dataset.inputs,
        dataset.targets,
        dataset.task_kind,
        train,
        evals,
        calib,
        dataset.planted,
        dataset.trivial,
    )


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    meta = {"schema": DATASET_SCHEMA, "task_kind": dataset.task_kind, "trivial": dataset.trivial}
    arrays = {
        "inputs": dataset.inputs,
        "targets": dataset.targets,
        "train_idx": dataset.train_idx,
        "eval_idx": dataset.eval_idx,
        "calib_idx": dataset.calib_idx,
    }
    for k, ad in dataset.planted.items():
        arrays[f"planted_{k}_a"] = ad.a_factor
        arrays[f"planted_{k}_b"] = ad.b_factor
    write_arrays(path, arrays, meta)


def load_dataset(path: str | Path) -> Dataset:
    meta, z = read_arrays(path)
    if meta.get("schema") != DATASET_SCHEMA:
        raise ValueError(f"unsupported dataset schema {meta.get('schema')!r}")
    planted = {}
    for key in z:
        if key.startswith("planted_") and key.endswith("_a"):
            k = int(key.split("_")[1])
            planted[k] = AdapterPair(k, z[key], z[f"planted_{k}_b"])
    return Dataset(
        z["inputs"],
        z["targets"],
        meta["task_kind"],
        z["train_idx"],
        z["eval_idx"],
        z["calib_idx"],
        planted,
        meta["trivial"],
    )


def as_mapping(spec: PlantedSpec) -> Mapping:
    return {
        "ranks": dict(spec.ranks),
        "scales": dict(spec.scales),
        "decay": spec.decay,
        "noise": spec.noise,
        "n_samples": spec.n_samples,
        "input_scale": spec.input_scale,
        "seed": spec.seed,
    }
