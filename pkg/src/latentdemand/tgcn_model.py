"""Spatiotemporal forecaster: two GCN layers feeding an LSTM, with a
Gaussian or quantile head per graph node.

The recurrent cell runs per node with shared weights: the GCN output row
of each node is that node's input vector at every step, and the heads map
each node's hidden state through one shared linear layer. This keeps the
model exactly permutation-equivariant (relabeling nodes and the adjacency
consistently permutes the outputs) and local when the adjacency is the
identity, both of which are load-bearing invariants for the tests.

A single forward pass produces a forecast for every node.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .errors import NumericalError, ValidationError
from .tensor_core import Tensor

GATES = ("i", "f", "o", "c")

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TgcnConfig:
    in_features: int = 5
    gcn_channels: tuple[int, int] = (16, 8)
    hidden_size: int = 32
    head: str = "gaussian"  # "gaussian" | "quantile"
    quantiles: tuple[float, ...] = (0.05, 0.5, 0.95)
    gcn_output_activation: str = "identity"  # "identity" | "relu"
    sigma_floor: float = 1e-6

    def __post_init__(self):
        if self.head not in ("gaussian", "quantile"):
            raise ValidationError(f"unknown head {self.head!r}")
        if self.gcn_output_activation not in ("identity", "relu"):
            raise ValidationError(f"unknown activation {self.gcn_output_activation!r}")
        if self.head == "quantile":
            if not self.quantiles or any(not (0.0 < q < 1.0) for q in self.quantiles):
                raise ValidationError(f"quantiles must lie strictly in (0, 1): {self.quantiles}")
            if list(self.quantiles) != sorted(self.quantiles):
                raise ValidationError("quantiles must be sorted ascending")

    @property
    def head_dim(self) -> int:
        return 2 if self.head == "gaussian" else len(self.quantiles)

    def to_dict(self) -> dict:
        return {
            "in_features": self.in_features,
            "gcn_channels": list(self.gcn_channels),
            "hidden_size": self.hidden_size,
            "head": self.head,
            "quantiles": list(self.quantiles),
            "gcn_output_activation": self.gcn_output_activation,
            "sigma_floor": self.sigma_floor,
        }

    @staticmethod
    def from_dict(d: dict) -> "TgcnConfig":
        return TgcnConfig(
            in_features=int(d["in_features"]),
            gcn_channels=tuple(d["gcn_channels"]),
            hidden_size=int(d["hidden_size"]),
            head=d["head"],
            quantiles=tuple(d["quantiles"]),
            gcn_output_activation=d["gcn_output_activation"],
            sigma_floor=float(d["sigma_floor"]),
        )


@dataclass
class GaussianForecast:
    mean: Tensor  # (batch, nodes)
    std: Tensor   # (batch, nodes), strictly positive


@dataclass
class QuantileForecast:
    values: Tensor  # (batch, nodes, len(quantiles))
    quantiles: tuple[float, ...] = field(default=(0.05, 0.5, 0.95))


def param_shapes(config: TgcnConfig) -> dict[str, tuple[int, ...]]:
    c1, c2 = config.gcn_channels
    hidden = config.hidden_size
    shapes: dict[str, tuple[int, ...]] = {
        "gcn_w1": (config.in_features, c1),
        "gcn_w2": (c1, c2),
    }
    for gate in GATES:
        shapes[f"w_{gate}"] = (c2, hidden)
        shapes[f"u_{gate}"] = (hidden, hidden)
        shapes[f"b_{gate}"] = (hidden,)
    shapes["head_w"] = (hidden, config.head_dim)
    shapes["head_b"] = (config.head_dim,)
    return shapes


def init_params(config: TgcnConfig, seed: int = 0) -> dict[str, Tensor]:
    """Uniform(-r, r) weights with r = 1/sqrt(fan_in); zero gate biases.

    Head biases start at the scale of min-max-normalized targets (0.5 for
    value outputs, softplus pre-image of 0.2 for the spread output), which
    saves the optimizer the long drift from zero.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        if len(shape) == 1:
            params[name] = tc.parameter(np.zeros(shape))
        else:
            r = 1.0 / np.sqrt(shape[0])
            params[name] = tc.parameter(rng.uniform(-r, r, size=shape))
    head_bias = params["head_b"].data
    if config.head == "gaussian":
        head_bias[0] = 0.5
        head_bias[1] = math.log(math.expm1(0.2))  # softplus(x) = 0.2
    else:
        head_bias[:] = 0.5
    return params


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.zero_grad()


def gcn_forward(adj_norm: np.ndarray, x, w1: Tensor, w2: Tensor,
                output_activation: str = "identity") -> Tensor:
    """Two-layer graph convolution: act(A (relu(A x W1)) W2).

    x is (nodes, features) or batched (batch, nodes, features); adj_norm is
    the normalized (nodes, nodes) adjacency with self-connections. The
    outer activation defaults to identity because the recurrent cell that
    consumes this output applies its own nonlinearities.
    """
    x = tc.as_tensor(x)
    if adj_norm.shape[0] != adj_norm.shape[1]:
        raise ValidationError(f"adjacency must be square, got {adj_norm.shape}")
    if x.data.shape[-2] != adj_norm.shape[0]:
        raise ValidationError(
            f"node count mismatch: features {x.data.shape} vs adjacency {adj_norm.shape}")
    adj = tc.as_tensor(adj_norm)
    hidden = tc.relu(tc.matmul(tc.matmul(adj, x), w1))
    # Same product as (adj @ hidden) @ w2; mixing after the channel
    # projection contracts the narrower tensor.
    out = tc.matmul(adj, tc.matmul(hidden, w2))
    if output_activation == "relu":
        out = tc.relu(out)
    return out


def _packed_gate_weights(params: dict[str, Tensor]) -> tuple[Tensor, Tensor, Tensor]:
    """Concatenate per-gate weights (input/forget/output/candidate order)
    so each step needs two matrix products instead of eight."""
    w = tc.concat([params[f"w_{g}"] for g in GATES], axis=1)
    u = tc.concat([params[f"u_{g}"] for g in GATES], axis=1)
    b = tc.concat([params[f"b_{g}"] for g in GATES], axis=0)
    return w, u, b


def lstm_step(g_t, h_prev, c_prev, params: dict[str, Tensor],
              packed=None) -> tuple[Tensor, Tensor]:
    """One recurrent step over rows of g_t (rows are node/batch copies).

    Gates use the logistic function, the candidate uses tanh, the new cell
    state is forget*old + input*candidate, and the hidden state is
    output*tanh(cell).
    """
    g_t, h_prev, c_prev = tc.as_tensor(g_t), tc.as_tensor(h_prev), tc.as_tensor(c_prev)
    w, u, b = packed if packed is not None else _packed_gate_weights(params)
    acts = tc.add(tc.add(tc.matmul(g_t, w), tc.matmul(h_prev, u)), b)
    return tc.lstm_gates(acts, c_prev)


def tgcn_forward(adj_norm: np.ndarray, window: np.ndarray, params: dict[str, Tensor],
                 config: TgcnConfig):
    """Run the forecaster over a window of past observations.

    window is (batch, steps, nodes, features) or unbatched
    (steps, nodes, features); initial hidden and cell states are zero.
    Returns a GaussianForecast or QuantileForecast per the config head.
    """
    window = np.asarray(window, dtype=np.float64)
    squeeze = window.ndim == 3
    if squeeze:
        window = window[None]
    if window.ndim != 4:
        raise ValidationError(f"window must be 3-D or 4-D, got shape {window.shape}")
    batch, steps, nodes, feats = window.shape
    if steps < 1:
        raise ValidationError("window must contain at least one step")
    if feats != config.in_features:
        raise ValidationError(f"expected {config.in_features} features, got {feats}")
    if nodes != adj_norm.shape[0]:
        raise ValidationError(f"window has {nodes} nodes, adjacency {adj_norm.shape[0]}")
    c2 = config.gcn_channels[1]
    hidden = config.hidden_size
    h = tc.as_tensor(np.zeros((batch * nodes, hidden)))
    c = tc.as_tensor(np.zeros((batch * nodes, hidden)))
    # The spatial extractor has no cross-step state, so all window steps go
    # through it as one large batch; only the recurrence stays sequential.
    stacked = window.reshape(batch * steps, nodes, feats)
    spat_all = gcn_forward(adj_norm, stacked, params["gcn_w1"], params["gcn_w2"],
                           config.gcn_output_activation)
    per_step = tc.unstack_rows(spat_all, steps)
    packed = _packed_gate_weights(params)
    for t in range(steps):
        rows = tc.reshape(per_step[t], (batch * nodes, c2))
        h, c = lstm_step(rows, h, c, params, packed=packed)
        if tc.CHECK_FINITE and not np.all(np.isfinite(h.data)):
            raise NumericalError(f"non-finite hidden state at step {t}")
    raw = tc.add(tc.matmul(h, params["head_w"]), params["head_b"])
    if not np.all(np.isfinite(raw.data)):
        raise NumericalError("non-finite head output")
    if config.head == "gaussian":
        mu = tc.reshape(raw[:, 0], (batch, nodes))
        sigma = tc.reshape(tc.add(tc.softplus(raw[:, 1]), config.sigma_floor), (batch, nodes))
        if squeeze:
            mu, sigma = tc.reshape(mu, (nodes,)), tc.reshape(sigma, (nodes,))
        return GaussianForecast(mean=mu, std=sigma)
    values = tc.reshape(raw, (batch, nodes, config.head_dim))
    if squeeze:
        values = tc.reshape(values, (nodes, config.head_dim))
    return QuantileForecast(values=values, quantiles=config.quantiles)


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(path, params: dict[str, Tensor], config: TgcnConfig,
                    meta: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "meta": meta or {},
        "arrays": {
            name: {"shape": list(t.data.shape), "data": [repr(float(v)) for v in t.data.ravel()]}
            for name, t in sorted(params.items())
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def load_checkpoint(path) -> tuple[dict[str, Tensor], TgcnConfig, dict]:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {payload.get('format_version')}")
    config = TgcnConfig.from_dict(payload["config"])
    expected = param_shapes(config)
    params: dict[str, Tensor] = {}
    for name, shape in expected.items():
        if name not in payload["arrays"]:
            raise ValidationError(f"checkpoint missing array {name!r}")
        entry = payload["arrays"][name]
        if tuple(entry["shape"]) != shape:
            raise ValidationError(
                f"checkpoint array {name!r} has shape {entry['shape']}, expected {shape}")
        data = np.array([float(v) for v in entry["data"]]).reshape(shape)
        params[name] = tc.parameter(data)
    return params, config, payload.get("meta", {})
