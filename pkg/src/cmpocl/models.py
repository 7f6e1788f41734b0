"""Encoder, predictor, EMA target and the SGD optimiser.

Parameters live in plain ordered ``dict[str, np.ndarray]`` maps. Linear
weights are stored ``(fan_in, fan_out)`` so a layer is ``x @ w + b``;
convolution weights are ``(c_out, c_in * k * k)``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import ContractError, Graph, Node

Params = dict[str, np.ndarray]

BACKBONES = ("mlp", "conv")


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    backbone: str = "mlp"
    hidden: tuple[int, ...] = (64,)
    channels: tuple[int, ...] = (8, 16, 32)
    image_shape: Optional[tuple[int, int, int]] = None
    proj_hidden: int = 64
    dim: int = 32
    pred_hidden: Optional[int] = None
    standardize: bool = False

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ContractError(f"backbone must be one of {BACKBONES}")
        widths = [self.input_dim, *self.hidden, *self.channels, self.proj_hidden, self.dim]
        if self.pred_hidden is not None:
            widths.append(self.pred_hidden)
        if any(w < 1 for w in widths):
            raise ContractError("all widths must be >= 1")
        if self.backbone == "conv":
            if self.image_shape is None:
                raise ContractError("conv backbone needs image_shape")
            c, h, w = self.image_shape
            if c * h * w != self.input_dim:
                raise ContractError("image_shape does not match input_dim")

    @property
    def predictor_hidden(self) -> int:
        return self.pred_hidden if self.pred_hidden is not None else max(1, self.dim // 4)

    @property
    def feature_dim(self) -> int:
        return self.hidden[-1] if self.backbone == "mlp" else self.channels[-1]

    def encoder_layout(self) -> list[tuple[str, tuple[int, ...]]]:
        """(name, shape) of every online-encoder parameter in declaration order."""
        layout = []
        if self.backbone == "mlp":
            widths = [self.input_dim, *self.hidden]
            for i, (a, b) in enumerate(zip(widths, widths[1:])):
                layout += [(f"backbone.{i}.w", (a, b)), (f"backbone.{i}.b", (1, b))]
        else:
            c_in = self.image_shape[0]
            for i, c_out in enumerate(self.channels):
                layout += [(f"backbone.{i}.w", (c_out, c_in * 9)), (f"backbone.{i}.b", (1, c_out))]
                c_in = c_out
        widths = [self.feature_dim, self.proj_hidden, self.dim]
        for i, (a, b) in enumerate(zip(widths, widths[1:])):
            layout += [(f"projector.{i}.w", (a, b)), (f"projector.{i}.b", (1, b))]
        return layout

    def predictor_layout(self) -> list[tuple[str, tuple[int, ...]]]:
        widths = [self.dim, self.predictor_hidden, self.dim]
        layout = []
        for i, (a, b) in enumerate(zip(widths, widths[1:])):
            layout += [(f"predictor.{i}.w", (a, b)), (f"predictor.{i}.b", (1, b))]
        return layout


def kaiming_bound(fan_in: int) -> float:
    return float(np.sqrt(6.0 / fan_in))


def init_params(spec: NetworkSpec, seed: int) -> tuple[Params, Params]:
    """Kaiming-uniform weights and zero biases for (encoder, predictor)."""
    rng = np.random.default_rng(seed)
    enc_layout = spec.encoder_layout()
    encoder = {}
    for name, shape in enc_layout:
        if name.endswith(".b"):
            encoder[name] = np.zeros(shape)
            continue
        conv = spec.backbone == "conv" and name.startswith("backbone")
        fan_in = shape[1] if conv else shape[0]
        encoder[name] = rng.uniform(-kaiming_bound(fan_in), kaiming_bound(fan_in), size=shape)
    predictor = {}
    for name, shape in spec.predictor_layout():
        if name.endswith(".b"):
            predictor[name] = np.zeros(shape)
        else:
            predictor[name] = rng.uniform(-kaiming_bound(shape[0]), kaiming_bound(shape[0]), size=shape)
    return encoder, predictor


@dataclass
class EncoderState:
    spec: NetworkSpec
    online: Params
    predictor: Optional[Params] = None
    target: Optional[Params] = None
    ema_tau: float = 0.99

    def __post_init__(self):
        if not 0.0 <= self.ema_tau <= 1.0:
            raise ContractError("ema_tau must lie in [0, 1]")
        if self.target is not None:
            for name, value in self.online.items():
                if self.target[name].shape != value.shape:
                    raise ContractError(f"target/online shape mismatch at {name}")

    @classmethod
    def create(cls, spec: NetworkSpec, seed: int, with_target: bool, with_predictor: bool = True,
               ema_tau: float = 0.99) -> "EncoderState":
        online, predictor = init_params(spec, seed)
        target = {k: v.copy() for k, v in online.items()} if with_target else None
        return cls(spec, online, predictor if with_predictor else None, target, ema_tau)

    def snapshot(self) -> "EncoderState":
        return copy.deepcopy(self)


def bind(graph: Graph, params: Params, trainable: bool = True) -> dict[str, Node]:
    if trainable:
        return {k: graph.leaf(v, name=k) for k, v in params.items()}
    return {k: graph.constant(v, name=k) for k, v in params.items()}


def _linear(x: Node, nodes, prefix: str) -> Node:
    return T.add(T.matmul(x, nodes[prefix + ".w"]), nodes[prefix + ".b"])


def _mlp(x: Node, nodes, name: str, n_layers: int, final_relu: bool, standardize: bool) -> Node:
    for i in range(n_layers):
        x = _linear(x, nodes, f"{name}.{i}")
        if i < n_layers - 1 or final_relu:
            if standardize:
                x = T.standardize_rows(x)
            x = T.relu(x)
    return x


def encode(spec: NetworkSpec, nodes: dict[str, Node], x: Node, return_features: bool = False):
    """Backbone then projector; optionally also return the backbone output."""
    if x.shape[1] != spec.input_dim:
        raise ContractError(f"input width {x.shape[1]} != {spec.input_dim}")
    if spec.backbone == "mlp":
        h = _mlp(x, nodes, "backbone", len(spec.hidden), True, spec.standardize)
    else:
        h, shape = x, spec.image_shape
        for i in range(len(spec.channels)):
            h, shape = T.conv2d(h, nodes[f"backbone.{i}.w"], nodes[f"backbone.{i}.b"], shape,
                                stride=1 if i == 0 else 2, pad=1)
            h = T.relu(h)
        h = T.global_avg_pool(h, shape)
    z = _mlp(h, nodes, "projector", 2, False, spec.standardize)
    return (z, h) if return_features else z


def predict(spec: NetworkSpec, nodes: dict[str, Node], z: Node) -> Node:
    if z.shape[1] != spec.dim:
        raise ContractError(f"predictor input width {z.shape[1]} != {spec.dim}")
    return _mlp(z, nodes, "predictor", 2, False, spec.standardize)


def forward_encoder(state: EncoderState, x, use_target: bool = False, graph: Optional[Graph] = None,
                    return_features: bool = False):
    """Embed a batch; the target path is built from constants only."""
    if use_target and state.target is None:
        raise ContractError("target encoder requested but state has none")
    graph = graph if graph is not None else Graph()
    params = state.target if use_target else state.online
    nodes = bind(graph, params, trainable=not use_target)
    x = x if isinstance(x, Node) else graph.constant(x)
    return encode(state.spec, nodes, x, return_features)


def forward_predictor(state: EncoderState, z, graph: Optional[Graph] = None) -> Node:
    if state.predictor is None:
        raise ContractError("state has no predictor")
    if not isinstance(z, Node):
        graph = graph if graph is not None else Graph()
        z = graph.constant(z)
    return predict(state.spec, bind(z.graph, state.predictor), z)


def ema_update(state: EncoderState) -> EncoderState:
    """target <- tau * target + (1 - tau) * online, in place."""
    if state.target is None:
        raise ContractError("ema_update needs a target encoder")
    tau = state.ema_tau
    for name, online in state.online.items():
        state.target[name] = tau * state.target[name] + (1.0 - tau) * online
    return state


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(opt: OptimizerState, params: Params, grads: dict[str, np.ndarray]) -> Params:
    """Classical momentum with coupled weight decay: v = m v + g + wd p; p -= lr v."""
    updated = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        v = opt.velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        v = opt.momentum * v + g + opt.weight_decay * p
        opt.velocity[name] = v
        updated[name] = p - opt.lr * v
    return updated
