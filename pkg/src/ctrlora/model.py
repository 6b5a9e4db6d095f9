"""Frozen base networks with injected low-rank adapters.

Two architectures are supported: a plain MLP and a single pre-norm transformer
block. Both expose the same surface: a forward pass that applies ``W + A B^T``
through the adapter path (never materializing the sum), a hand-written reverse
pass that returns per-layer inputs ``a``, per-example output gradients ``g`` and
the full weight gradient, and an exact merge of adapters into the base weights.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping

import numpy as np

from .linalg import make_rng


class ShapeError(ValueError):
    pass


class NumericOverflowError(ArithmeticError):
    pass


ACTIVATIONS = ("relu", "gelu", "none")
TASKS = ("regression", "classification")


@dataclass
class ArchSpec:
    """Declarative architecture description.

    ``kind="mlp"`` uses ``dims`` (input, hidden..., output). ``kind="transformer"``
    uses ``d_model``, ``heads``, ``seq_len`` and ``d_ff``; inputs are flattened
    ``(seq_len * d_model)`` vectors. Classification transformers get a frozen,
    adapter-ineligible readout on the mean-pooled block output.
    """

    kind: str = "mlp"
    dims: list[int] = field(default_factory=lambda: [8, 16, 4])
    activation: str = "relu"
    task: str = "regression"
    d_model: int = 16
    heads: int = 2
    seq_len: int = 4
    d_ff: int | None = None
    n_classes: int = 4
    init_gain: float = 1.0

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ShapeError(f"unknown task {self.task!r}")
        if self.kind == "mlp":
            if len(self.dims) < 2 or any(int(d) < 1 for d in self.dims):
                raise ShapeError(f"mlp dims must list >= 2 positive sizes, got {self.dims}")
            if self.activation not in ACTIVATIONS:
                raise ShapeError(f"unknown activation {self.activation!r}")
            if self.task == "classification" and self.dims[-1] < 2:
                raise ShapeError("classification needs at least 2 output classes")
        elif self.kind == "transformer":
            if self.d_model < 1 or self.heads < 1 or self.d_model % self.heads:
                raise ShapeError(f"d_model={self.d_model} not divisible by heads={self.heads}")
            if self.seq_len < 1:
                raise ShapeError("seq_len must be positive")
            if self.d_ff is not None and self.d_ff < 1:
                raise ShapeError("d_ff must be positive")
            if self.task == "classification" and self.n_classes < 2:
                raise ShapeError("classification needs at least 2 output classes")
        else:
            raise ShapeError(f"unknown architecture kind {self.kind!r}")

    @property
    def input_dim(self) -> int:
        return self.dims[0] if self.kind == "mlp" else self.seq_len * self.d_model

    @property
    def output_dim(self) -> int:
        if self.kind == "mlp":
            return self.dims[-1]
        if self.task == "classification":
            return self.n_classes
        return self.seq_len * self.d_model

    @property
    def ff_dim(self) -> int:
        return self.d_ff if self.d_ff is not None else 4 * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LayerSpec:
    name: str
    weight: np.ndarray  # (d_out, d_in)
    bias: np.ndarray
    nonlinearity: str = "none"  # relu | gelu | softmax-head | none
    adapter_eligible: bool = True

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]


@dataclass
class BaseNetwork:
    arch: ArchSpec
    layers: list[LayerSpec]

    def eligible_ids(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.adapter_eligible]

    def param_count(self) -> int:
        return sum(layer.weight.size + layer.bias.size for layer in self.layers)

    def shape(self, layer_id: int) -> tuple[int, int]:
        return self.layers[layer_id].weight.shape

    def with_weights(self, weights: Mapping[int, np.ndarray]) -> "BaseNetwork":
        layers = [
            replace(layer, weight=np.array(weights[i], dtype=np.float64)) if i in weights else layer
            for i, layer in enumerate(self.layers)
        ]
        return BaseNetwork(self.arch, layers)


@dataclass
class AdapterPair:
    layer_id: int
    a_factor: np.ndarray  # (d_out, r)
    b_factor: np.ndarray  # (d_in, r)

    @property
    def rank(self) -> int:
        return self.a_factor.shape[1]

    def delta(self) -> np.ndarray:
        return self.a_factor @ self.b_factor.T

    def copy(self) -> "AdapterPair":
        return AdapterPair(self.layer_id, self.a_factor.copy(), self.b_factor.copy())


Adapters = Mapping[int, AdapterPair]


@dataclass
class Batch:
    inputs: np.ndarray  # (n, input_dim)
    targets: np.ndarray  # (n, output_dim) floats or (n,) class ids

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass
class BatchCache:
    """Per-layer K-FAC statistics for one batch.

    ``a[l]`` holds layer inputs (rows x d_in) and ``g[l]`` the gradients of the
    per-example loss with respect to the layer outputs (rows x d_out). For the
    transformer block a row is a token, so ``rows = examples * seq_len``.
    """

    a: dict[int, np.ndarray]
    g: dict[int, np.ndarray]
    loss: float
    n_examples: int


@dataclass
class GradientBundle:
    full: dict[int, np.ndarray]  # G_l, shape of W_l
    adapter: dict[int, tuple[np.ndarray, np.ndarray]]  # (dL/dA, dL/dB)
    loss: float


# --------------------------------------------------------------------------- construction


def build_network(arch: ArchSpec | Mapping, seed: int = 0) -> BaseNetwork:
    if not isinstance(arch, ArchSpec):
        arch = ArchSpec(**dict(arch))
    arch.validate()
    rng = make_rng([seed, 0x5EED])

    def dense(name, d_out, d_in, nonlinearity, eligible=True):
        w = rng.standard_normal((d_out, d_in)) * (arch.init_gain / math.sqrt(d_in))
        b = 0.1 * rng.standard_normal(d_out)
        return LayerSpec(name, w, b, nonlinearity, eligible)

    layers: list[LayerSpec] = []
    if arch.kind == "mlp":
        dims = [int(d) for d in arch.dims]
        arch.dims = dims
        last = len(dims) - 2
        for i in range(len(dims) - 1):
            if i < last:
                act = arch.activation
            else:
                act = "softmax-head" if arch.task == "classification" else "none"
            layers.append(dense(f"fc{i}", dims[i + 1], dims[i], act))
    else:
        d, f = arch.d_model, arch.ff_dim
        for name in ("q", "k", "v", "o"):
            layers.append(dense(name, d, d, "none"))
        layers.append(dense("ff_in", f, d, "gelu"))
        layers.append(dense("ff_out", d, f, "none"))
        if arch.task == "classification":
            layers.append(dense("head", arch.n_classes, d, "softmax-head", eligible=False))
    return BaseNetwork(arch, layers)


def init_adapters(
    network: BaseNetwork,
    plan,
    sigma: float | None = None,
    seed: int = 0,
) -> dict[int, AdapterPair]:
    """LoRA initialization: ``A ~ N(0, sigma^2)``, ``B = 0``.

    ``plan`` is a :class:`~ctrlora.scheduler.BudgetPlan` or a plain
    ``{layer_id: rank}`` mapping. ``sigma=None`` uses ``1/sqrt(d_out)`` per layer so
    that columns of ``A`` have roughly unit norm.
    """
    ranks = _ranks_of(plan)
    adapters: dict[int, AdapterPair] = {}
    for layer_id in sorted(ranks):
        r = int(ranks[layer_id])
        if layer_id not in network.eligible_ids():
            raise ShapeError(f"layer {layer_id} is not adapter-eligible")
        d_out, d_in = network.shape(layer_id)
        if r < 0 or r > min(d_in, d_out):
            raise ShapeError(f"rank {r} exceeds min dim of layer {layer_id} ({d_out}x{d_in})")
        s = 1.0 / math.sqrt(d_out) if sigma is None else float(sigma)
        rng = make_rng([seed, 0xADA, layer_id])
        a = rng.standard_normal((d_out, r)) * s
        adapters[layer_id] = AdapterPair(layer_id, a, np.zeros((d_in, r)))
    return adapters


def _ranks_of(plan) -> dict[int, int]:
    ranks = getattr(plan, "ranks", plan)
    return {int(k): int(v) for k, v in dict(ranks).items()}


def count_trainable(plan, network: BaseNetwork) -> int:
    """``sum_l r_l * (d_in + d_out)`` over the plan's layers."""
    total = 0
    for layer_id, r in _ranks_of(plan).items():
        d_out, d_in = network.shape(layer_id)
        total += r * (d_in + d_out)
    return total


def merge_adapters(network: BaseNetwork, adapters: Adapters) -> BaseNetwork:
    """Fold every adapter into its base weight; the result carries no adapters."""
    weights = {}
    for layer_id, ad in adapters.items():
        w = network.layers[layer_id].weight
        if ad.a_factor.shape[0] != w.shape[0] or ad.b_factor.shape[0] != w.shape[1]:
            raise ShapeError(f"adapter shapes do not match layer {layer_id}")
        if ad.rank:
            weights[layer_id] = w + ad.a_factor @ ad.b_factor.T
    return network.with_weights(weights) if weights else network.with_weights({})


# --------------------------------------------------------------------------- primitives

_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    return 0.5 * x * (1.0 + t), t


def _gelu_grad(x, t):
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def _act(kind, z):
    if kind == "relu":
        return np.maximum(z, 0.0), None
    if kind == "gelu":
        return _gelu(z)
    return z, None


def _act_grad(kind, z, aux, dy):
    if kind == "relu":
        return dy * (z > 0)
    if kind == "gelu":
        return dy * _gelu_grad(z, aux)
    return dy


_LN_EPS = 1e-5


def _layernorm(x):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + _LN_EPS)
    return xc * rstd, rstd


def _layernorm_grad(xhat, rstd, dy):
    return rstd * (
        dy - dy.mean(axis=-1, keepdims=True) - xhat * (dy * xhat).mean(axis=-1, keepdims=True)
    )


def _softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class _Linear:
    """One affine map with an optional adapter and weight offset."""

    def __init__(self, layer: LayerSpec, adapter: AdapterPair | None, offset: np.ndarray | None):
        self.w = layer.weight if offset is None else layer.weight + offset
        self.b = layer.bias
        self.adapter = adapter if adapter is not None and adapter.rank > 0 else None

    def __call__(self, a):
        y = a @ self.w.T + self.b
        if self.adapter is not None:
            y = y + (a @ self.adapter.b_factor) @ self.adapter.a_factor.T
        return y

    def back(self, a, dy, need_input_grad=True):
        """Returns (d input, dA, dB)."""
        da = dA = dB = None
        ad = self.adapter
        if need_input_grad:
            da = dy @ self.w
            if ad is not None:
                da = da + (dy @ ad.a_factor) @ ad.b_factor.T
        if ad is not None:
            dA = dy.T @ (a @ ad.b_factor)
            dB = a.T @ (dy @ ad.a_factor)
        return da, dA, dB


# --------------------------------------------------------------------------- passes


@dataclass
class _Pass:
    output: np.ndarray
    a: dict[int, np.ndarray]
    tape: dict


def _check_finite(x, where):
    if not np.all(np.isfinite(x)):
        raise NumericOverflowError(f"non-finite activations in {where}")


def _linears(network, adapters, offsets):
    adapters = adapters or {}
    offsets = offsets or {}
    return [
        _Linear(layer, adapters.get(i), offsets.get(i)) for i, layer in enumerate(network.layers)
    ]


def _forward_mlp(network, lin, x):
    a, tape = {}, {"z": {}, "aux": {}}
    h = x
    for i, layer in enumerate(network.layers):
        a[i] = h
        z = lin[i](h)
        _check_finite(z, layer.name)
        if layer.nonlinearity in ("relu", "gelu"):
            h, aux = _act(layer.nonlinearity, z)
            tape["z"][i], tape["aux"][i] = z, aux
        else:
            h = z
    return _Pass(h, a, tape)


def _backward_mlp(network, lin, ps, dout):
    rows, dA, dB = {}, {}, {}
    dy = dout
    for i in range(len(network.layers) - 1, -1, -1):
        layer = network.layers[i]
        if layer.nonlinearity in ("relu", "gelu"):
            dy = _act_grad(layer.nonlinearity, ps.tape["z"][i], ps.tape["aux"][i], dy)
        rows[i] = dy
        dy_in, dA[i], dB[i] = lin[i].back(ps.a[i], dy, need_input_grad=i > 0)
        dy = dy_in
    return rows, dA, dB


_Q, _K, _V, _O, _F1, _F2, _HEAD = range(7)


def _forward_block(network, lin, x):
    arch = network.arch
    n, s, d, h = x.shape[0], arch.seq_len, arch.d_model, arch.heads
    dh = d // h
    X = x.reshape(n, s, d)
    a = {}

    H1, rstd1 = _layernorm(X)
    flat1 = H1.reshape(n * s, d)
    a[_Q] = a[_K] = a[_V] = flat1
    q, k, v = (lin[j](flat1).reshape(n, s, h, dh).transpose(0, 2, 1, 3) for j in (_Q, _K, _V))
    scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh)
    _check_finite(scores, "attention")
    P = _softmax(scores)
    ctx = (P @ v).transpose(0, 2, 1, 3).reshape(n * s, d)
    a[_O] = ctx
    X1 = X + lin[_O](ctx).reshape(n, s, d)

    H2, rstd2 = _layernorm(X1)
    flat2 = H2.reshape(n * s, d)
    a[_F1] = flat2
    z1 = lin[_F1](flat2)
    _check_finite(z1, "ff_in")
    act, aux = _gelu(z1)
    a[_F2] = act
    out = X1 + lin[_F2](act).reshape(n, s, d)
    _check_finite(out, "block")

    tape = dict(H1=H1, rstd1=rstd1, H2=H2, rstd2=rstd2, q=q, k=k, v=v, P=P, z1=z1, aux=aux)
    if arch.task == "classification":
        pooled = out.mean(axis=1)
        a[_HEAD] = pooled
        logits = lin[_HEAD](pooled)
        _check_finite(logits, "head")
        return _Pass(logits, a, tape)
    return _Pass(out.reshape(n, s * d), a, tape)


def _backward_block(network, lin, ps, dout):
    arch = network.arch
    t = ps.tape
    n = dout.shape[0]
    s, d, h = arch.seq_len, arch.d_model, arch.heads
    dh = d // h
    rows, dA, dB = {}, {}, {}

    if arch.task == "classification":
        rows[_HEAD] = dout
        dpooled, dA[_HEAD], dB[_HEAD] = lin[_HEAD].back(ps.a[_HEAD], dout)
        dOut = np.repeat(dpooled[:, None, :] / s, s, axis=1)
    else:
        dOut = dout.reshape(n, s, d)

    dflat = dOut.reshape(n * s, d)
    rows[_F2] = dflat
    dact, dA[_F2], dB[_F2] = lin[_F2].back(ps.a[_F2], dflat)
    dz1 = dact * _gelu_grad(t["z1"], t["aux"])
    rows[_F1] = dz1
    dH2, dA[_F1], dB[_F1] = lin[_F1].back(ps.a[_F1], dz1)
    dX1 = dOut + _layernorm_grad(t["H2"], t["rstd2"], dH2.reshape(n, s, d))

    dattn = dX1.reshape(n * s, d)
    rows[_O] = dattn
    dctx, dA[_O], dB[_O] = lin[_O].back(ps.a[_O], dattn)
    dctx = dctx.reshape(n, s, h, dh).transpose(0, 2, 1, 3)
    P = t["P"]
    dP = dctx @ t["v"].transpose(0, 1, 3, 2)
    dv = P.transpose(0, 1, 3, 2) @ dctx
    dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) / math.sqrt(dh)
    dq = dS @ t["k"]
    dk = dS.transpose(0, 1, 3, 2) @ t["q"]

    dH1 = np.zeros((n * s, d))
    for j, dproj in ((_Q, dq), (_K, dk), (_V, dv)):
        dproj = dproj.transpose(0, 2, 1, 3).reshape(n * s, d)
        rows[j] = dproj
        din, dA[j], dB[j] = lin[j].back(ps.a[j], dproj)
        dH1 += din
    # input gradient is not needed: nothing upstream is trainable
    return rows, dA, dB


def _check_batch(network, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != network.arch.input_dim:
        raise ShapeError(f"batch inputs of shape {x.shape} do not match input dim {network.arch.input_dim}")
    return x


def predict(network: BaseNetwork, adapters: Adapters | None, x) -> np.ndarray:
    """Network outputs (regression values or class logits)."""
    x = _check_batch(network, x)
    lin = _linears(network, adapters, None)
    fwd = _forward_mlp if network.arch.kind == "mlp" else _forward_block
    with np.errstate(over="ignore", invalid="ignore"):
        return fwd(network, lin, x).output


def loss_and_output_grad(network: BaseNetwork, output: np.ndarray, targets) -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its gradient w.r.t. the outputs."""
    n = output.shape[0]
    if network.arch.task == "classification":
        labels = np.asarray(targets).astype(np.int64).reshape(-1)
        if labels.shape[0] != n:
            raise ShapeError("label count does not match batch size")
        z = output - output.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        loss = float(np.mean(lse - z[np.arange(n), labels]))
        grad = np.exp(z - lse[:, None])
        grad[np.arange(n), labels] -= 1.0
        return loss, grad / n
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != output.shape:
        raise ShapeError(f"targets of shape {y.shape} do not match outputs {output.shape}")
    r = output - y
    d_out = output.shape[1]
    loss = float(np.mean(np.sum(r * r, axis=1) / d_out))
    return loss, (2.0 / (n * d_out)) * r


@dataclass
class PassResult:
    loss: float
    output: np.ndarray
    a: dict[int, np.ndarray]
    dy: dict[int, np.ndarray]  # gradient of the batch-mean loss w.r.t. layer outputs
    adapter_grads: dict[int, tuple[np.ndarray, np.ndarray]]
    n_examples: int

    def full_gradient(self, layer_id: int) -> np.ndarray:
        return self.dy[layer_id].T @ self.a[layer_id]


def run_pass(
    network: BaseNetwork,
    adapters: Adapters | None,
    batch: Batch,
    output_grad=None,
    offsets: Mapping[int, np.ndarray] | None = None,
) -> PassResult:
    """Forward and reverse pass.

    ``output_grad`` (an array, or a callable of the outputs) replaces the loss
    gradient w.r.t. the outputs, which is how sampled-Fisher statistics are
    gathered; ``offsets`` are added to base weights.
    """
    x = _check_batch(network, batch.inputs)
    lin = _linears(network, adapters, offsets)
    fwd, back = (_forward_mlp, _backward_mlp) if network.arch.kind == "mlp" else (_forward_block, _backward_block)
    # overflow is detected by the finiteness checks and raised as NumericOverflowError
    with np.errstate(over="ignore", invalid="ignore"):
        ps = fwd(network, lin, x)
        loss, dout = loss_and_output_grad(network, ps.output, batch.targets)
    if not math.isfinite(loss):
        raise NumericOverflowError("non-finite loss")
    if callable(output_grad):
        dout = output_grad(ps.output)
    elif output_grad is not None:
        dout = output_grad
    dy, dA, dB = back(network, lin, ps, dout)
    grads = {
        i: (dA[i], dB[i])
        for i in (adapters or {})
        if dA.get(i) is not None
    }
    return PassResult(loss, ps.output, ps.a, dy, grads, x.shape[0])


def forward(network: BaseNetwork, adapters: Adapters | None, batch: Batch) -> tuple[float, BatchCache]:
    """Loss plus the K-FAC sites (layer inputs and per-example output gradients)."""
    res = run_pass(network, adapters, batch)
    eligible = network.eligible_ids()
    a = {i: res.a[i] for i in eligible}
    g = {i: res.dy[i] * res.n_examples for i in eligible}
    return res.loss, BatchCache(a, g, res.loss, res.n_examples)


def backward(network: BaseNetwork, adapters: Adapters | None, batch: Batch) -> GradientBundle:
    """Full-matrix gradients at ``W + A B^T`` and chain-ruled adapter gradients."""
    res = run_pass(network, adapters, batch)
    full = {i: res.full_gradient(i) for i in network.eligible_ids()}
    adapter = {}
    for i, ad in (adapters or {}).items():
        if ad.rank == 0:
            adapter[i] = (np.zeros_like(ad.a_factor), np.zeros_like(ad.b_factor))
        else:
            adapter[i] = res.adapter_grads[i]
    return GradientBundle(full, adapter, res.loss)


def loss_and_adapter_grads(network, adapters, batch) -> tuple[float, dict[int, tuple[np.ndarray, np.ndarray]]]:
    res = run_pass(network, adapters, batch)
    grads = {}
    for i, ad in adapters.items():
        grads[i] = res.adapter_grads.get(i, (np.zeros_like(ad.a_factor), np.zeros_like(ad.b_factor)))
    return res.loss, grads
