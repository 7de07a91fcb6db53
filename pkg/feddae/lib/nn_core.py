"""
Minimal dense network substrate.

Sequential affine layers with tanh/identity activations, inverted dropout on
the input vector, reverse-mode gradients accumulated into per-layer buffers,
and Adam/SGD updates. Everything is float64 and driven by explicit
numpy Generators so identical seeds give bit-identical results.

Gradient buffers are never zeroed implicitly: callers own the accumulation
window (zero_grads -> forward/backward xN -> step).
"""

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import Literal, Protocol

import numpy as np
from errors import ConfigurationError, PoisonedUpdateError, ShapeMismatchError
from rng_streams import INIT, derive_rng

logger = logging.getLogger(f"feddae.{__name__}")

Activation = Literal["tanh", "identity"]
ACTIVATIONS: tuple[Activation, ...] = ("tanh", "identity")


class Parametric(Protocol):
    """Anything whose named tensors can be stepped in place by an optimizer."""

    def named_parameters(self) -> dict[str, np.ndarray]: ...

    def named_grads(self) -> dict[str, np.ndarray]: ...


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: Activation = "identity"
    grad_weight: np.ndarray = field(init=False)
    grad_bias: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.weight = np.array(self.weight, dtype=np.float64)
        self.bias = np.array(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeMismatchError(
                f"Layer weight {self.weight.shape} and bias {self.bias.shape} do not form an affine map"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError("activation", f"unsupported activation {self.activation!r}")
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


class DenseNet:
    """Ordered stack of DenseLayers; consecutive dimensions must chain."""

    def __init__(self, layers: Sequence[DenseLayer], name: str = "net") -> None:
        if not layers:
            raise ShapeMismatchError(f"{name}: a network needs at least one layer")
        for i in range(1, len(layers)):
            if layers[i].in_dim != layers[i - 1].out_dim:
                raise ShapeMismatchError(
                    f"{name}: layer {i} expects {layers[i].in_dim} inputs but layer {i - 1} "
                    f"emits {layers[i - 1].out_dim}"
                )
        self.layers = list(layers)
        self.name = name

    @classmethod
    def build(
        cls,
        dims: Sequence[int],
        seed: int,
        name: str,
        hidden_activation: Activation = "tanh",
        output_activation: Activation = "identity",
        stream: Sequence[str | int] = (),
    ) -> "DenseNet":
        """
        Glorot-uniform weights and zero biases for the layer widths in dims.

        Each weight tensor draws from its own substream
        (seed, "init", *stream, name, layer index) so adding a network never
        shifts another network's initialization.
        """
        if len(dims) < 2:
            raise ConfigurationError("dims", f"need at least input and output width, got {list(dims)}")
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            rng = derive_rng(seed, INIT, *stream, name, i)
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weight = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            activation = output_activation if i == len(dims) - 2 else hidden_activation
            layers.append(DenseLayer(weight, np.zeros(fan_out), activation))
        return cls(layers, name=name)

    @classmethod
    def from_arrays(
        cls,
        weights: Sequence[np.ndarray],
        biases: Sequence[np.ndarray],
        activations: Sequence[Activation],
        name: str = "net",
    ) -> "DenseNet":
        if not (len(weights) == len(biases) == len(activations)):
            raise ShapeMismatchError(f"{name}: weights, biases and activations differ in length")
        return cls([DenseLayer(w, b, a) for w, b, a in zip(weights, biases, activations)], name=name)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dims(self) -> list[int]:
        return [self.in_dim] + [layer.out_dim for layer in self.layers]

    @property
    def activations(self) -> list[Activation]:
        return [layer.activation for layer in self.layers]

    def shapes(self) -> tuple[tuple[int, int], ...]:
        return tuple(layer.weight.shape for layer in self.layers)

    def named_parameters(self) -> dict[str, np.ndarray]:
        params: dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.layers):
            params[f"layers.{i}.weight"] = layer.weight
            params[f"layers.{i}.bias"] = layer.bias
        return params

    def named_grads(self) -> dict[str, np.ndarray]:
        grads: dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.layers):
            grads[f"layers.{i}.weight"] = layer.grad_weight
            grads[f"layers.{i}.bias"] = layer.grad_bias
        return grads

    def zero_grads(self) -> None:
        for layer in self.layers:
            layer.grad_weight.fill(0.0)
            layer.grad_bias.fill(0.0)

    def parameter_count(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def copy(self, name: str | None = None) -> "DenseNet":
        """Deep copy of parameters; gradient buffers start at zero."""
        layers = [DenseLayer(layer.weight.copy(), layer.bias.copy(), layer.activation) for layer in self.layers]
        return DenseNet(layers, name=name or self.name)

    def load_parameters(self, params: Mapping[str, np.ndarray]) -> None:
        """Overwrite parameters in place from a name -> array mapping."""
        own = self.named_parameters()
        missing = sorted(set(own) - set(params))
        if missing:
            raise ShapeMismatchError(f"{self.name}: missing tensors {missing}")
        for key, target in own.items():
            source = np.asarray(params[key], dtype=np.float64)
            if source.shape != target.shape:
                raise ShapeMismatchError(f"{self.name}.{key}: expected shape {target.shape}, got {source.shape}")
            target[...] = source


@dataclass
class Tape:
    """Activations cached by forward() for the matching backward()."""

    shapes: tuple[tuple[int, int], ...]
    inputs: list[np.ndarray]  # input to each layer (post-dropout for layer 0)
    outputs: list[np.ndarray]  # post-activation output of each layer
    dropout_scale: np.ndarray | None = None  # keep-mask / (1 - p), None when dropout is off


def forward(
    net: DenseNet,
    x: np.ndarray,
    train_mode: bool = False,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, Tape]:
    """
    Run x through the network.

    In train_mode with dropout_rate > 0, inverted dropout is applied to x only
    (kept entries scaled by 1/(1-p)); the mask draws rng.random(len(x)).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != net.in_dim:
        raise ShapeMismatchError(f"{net.name}: expected input of length {net.in_dim}, got shape {x.shape}")
    if not 0.0 <= dropout_rate < 1.0:
        raise ConfigurationError("dropout_rate", f"must lie in [0, 1), got {dropout_rate}")

    dropout_scale = None
    h = x
    if train_mode and dropout_rate > 0.0:
        if rng is None:
            raise ConfigurationError("rng", "dropout in train mode needs a random generator")
        keep = rng.random(x.shape[0]) >= dropout_rate
        dropout_scale = keep / (1.0 - dropout_rate)
        h = x * dropout_scale

    inputs: list[np.ndarray] = []
    outputs: list[np.ndarray] = []
    for layer in net.layers:
        inputs.append(h)
        a = layer.weight @ h + layer.bias
        if layer.activation == "tanh":
            a = np.tanh(a)
        outputs.append(a)
        h = a
    return h, Tape(net.shapes(), inputs, outputs, dropout_scale)


def backward(net: DenseNet, tape: Tape, upstream: np.ndarray) -> np.ndarray:
    """Accumulate dL/dparams into the net's grad buffers and return dL/dx."""
    if tape.shapes != net.shapes() or len(tape.inputs) != len(net.layers):
        raise ShapeMismatchError(f"{net.name}: tape was recorded on a network of shapes {tape.shapes}")
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != (net.out_dim,):
        raise ShapeMismatchError(f"{net.name}: upstream gradient must have shape ({net.out_dim},), got {g.shape}")

    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if layer.activation == "tanh":
            g = g * (1.0 - tape.outputs[i] ** 2)
        layer.grad_weight += np.outer(g, tape.inputs[i])
        layer.grad_bias += g
        g = layer.weight.T @ g

    if tape.dropout_scale is not None:
        g = g * tape.dropout_scale
    return g


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-shifted softmax; a probability vector for any finite input."""
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - np.max(z))
    return e / e.sum()


@dataclass
class AdamState:
    """Per-tensor first/second moments plus the shared step counter."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def named_moments(self, prefix: str = "") -> dict[str, np.ndarray]:
        moments = {}
        for key, value in self.first_moment.items():
            moments[f"{prefix}m.{key}"] = value
        for key, value in self.second_moment.items():
            moments[f"{prefix}v.{key}"] = value
        return moments


def _checked_grads(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    checked = {}
    for key, param in params.items():
        if key not in grads:
            raise ShapeMismatchError(f"No gradient supplied for {key}")
        grad = np.asarray(grads[key], dtype=np.float64)
        if grad.shape != param.shape:
            raise ShapeMismatchError(f"Gradient for {key} has shape {grad.shape}, parameter has {param.shape}")
        if not np.all(np.isfinite(grad)):
            raise PoisonedUpdateError(key)
        checked[key] = grad
    return checked


def adam_step(
    net: Parametric,
    state: AdamState,
    grad_source: Mapping[str, np.ndarray] | None = None,
    lr: float = 1e-3,
) -> None:
    """
    Bias-corrected Adam update of net's parameters in place.

    grad_source defaults to the net's own grad buffers, which are left
    untouched. Every gradient is validated before any parameter moves.
    """
    params = net.named_parameters()
    grads = _checked_grads(params, net.named_grads() if grad_source is None else grad_source)

    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for key, param in params.items():
        grad = grads[key]
        m = state.first_moment.get(key)
        if m is None:
            m = state.first_moment[key] = np.zeros_like(param)
            state.second_moment[key] = np.zeros_like(param)
        v = state.second_moment[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        param -= lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)


def sgd_step(net: Parametric, grad_source: Mapping[str, np.ndarray] | None = None, lr: float = 1e-3) -> None:
    """Plain gradient descent, p <- p - lr * g, with the same validation as adam_step."""
    params = net.named_parameters()
    grads = _checked_grads(params, net.named_grads() if grad_source is None else grad_source)
    for key, param in params.items():
        param -= lr * grads[key]
