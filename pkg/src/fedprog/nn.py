"""Minimal dense feed-forward network engine.

Everything the two training stages need and nothing more: forward pass,
mean-squared-error loss, backpropagation, Adam, and flat weight snapshots
that can cross the client/coordinator boundary. All math is float64 numpy
with explicit, fixed iteration orders so that runs are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericError, ShapeError

ACTIVATIONS = ("relu", "linear")


@dataclass
class Layer:
    weights: np.ndarray  # [out, in]
    bias: np.ndarray  # [out]
    activation: str

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ShapeError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise ShapeError("layer weights must be 2-D and bias 1-D")
        if self.weights.shape[0] != self.bias.shape[0]:
            raise ShapeError(
                f"bias length {self.bias.shape[0]} != output dim {self.weights.shape[0]}"
            )


class DenseNetwork:
    """A stack of dense layers with relu or linear activations.

    ``version`` increments on every in-place weight mutation; forward caches
    remember the version they were computed against so a stale cache cannot
    silently feed backward().
    """

    def __init__(self, layers: list[Layer]):
        if not layers:
            raise ShapeError("network needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.weights.shape[0] != nxt.weights.shape[1]:
                raise ShapeError(
                    f"layer output dim {prev.weights.shape[0]} does not feed "
                    f"layer input dim {nxt.weights.shape[1]}"
                )
        self.layers = layers
        self.version = 0
        for layer in layers:
            if not (np.isfinite(layer.weights).all() and np.isfinite(layer.bias).all()):
                raise NumericError("network parameters must be finite")

    @property
    def layer_dims(self) -> list[int]:
        dims = [self.layers[0].weights.shape[1]]
        dims.extend(layer.weights.shape[0] for layer in self.layers)
        return dims

    @property
    def input_dim(self) -> int:
        return self.layers[0].weights.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weights.shape[0]

    def parameter_count(self) -> int:
        return sum(l.weights.size + l.bias.size for l in self.layers)


def build_network(
    dims: list[int], rng: np.random.Generator, output_activation: str = "linear"
) -> DenseNetwork:
    """Glorot-uniform initialised network: relu hidden layers, linear output.

    ``dims`` is the full width chain including input, e.g. [40, 20, 30].
    """
    if len(dims) < 2:
        raise ShapeError("need at least input and output dims")
    layers = []
    last = len(dims) - 2
    for i, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        b = np.zeros(fan_out)
        act = output_activation if i == last else "relu"
        layers.append(Layer(w, b, act))
    return DenseNetwork(layers)


@dataclass(frozen=True)
class WeightSnapshot:
    """Flat, ordered parameter vector: layer 0 weights (row-major), layer 0
    bias, layer 1 weights, ... Bias blocks carry shape (n, 1)."""

    values: np.ndarray
    shape_spec: tuple[tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        self.values.flags.writeable = False
        expected = sum(r * c for r, c in self.shape_spec)
        if self.values.shape != (expected,):
            raise ShapeError(
                f"snapshot has {self.values.size} values, shape_spec wants {expected}"
            )

    @property
    def n_bytes(self) -> int:
        return self.values.size * 8

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, WeightSnapshot)
            and self.shape_spec == other.shape_spec
            and np.array_equal(self.values, other.values)
        )


def snapshot(net: DenseNetwork) -> WeightSnapshot:
    blocks, spec = [], []
    for layer in net.layers:
        blocks.append(layer.weights.ravel())
        spec.append(layer.weights.shape)
        blocks.append(layer.bias)
        spec.append((layer.bias.shape[0], 1))
    return WeightSnapshot(np.concatenate(blocks), tuple((int(r), int(c)) for r, c in spec))


def restore(net: DenseNetwork, snap: WeightSnapshot) -> DenseNetwork:
    """Write ``snap`` into ``net`` in place. Shapes must match exactly."""
    if snap.shape_spec != snapshot_spec(net):
        raise ShapeError(
            f"snapshot spec {snap.shape_spec} does not match network spec {snapshot_spec(net)}"
        )
    offset = 0
    for layer in net.layers:
        n = layer.weights.size
        layer.weights[...] = snap.values[offset : offset + n].reshape(layer.weights.shape)
        offset += n
        n = layer.bias.size
        layer.bias[...] = snap.values[offset : offset + n]
        offset += n
    net.version += 1
    return net


def snapshot_spec(net: DenseNetwork) -> tuple[tuple[int, int], ...]:
    spec = []
    for layer in net.layers:
        spec.append(tuple(int(d) for d in layer.weights.shape))
        spec.append((int(layer.bias.shape[0]), 1))
    return tuple(spec)


@dataclass
class ForwardCache:
    net_version: int
    inputs: list[np.ndarray]  # per-layer input x
    pre_activations: list[np.ndarray]  # per-layer z = x W^T + b


def forward(net: DenseNetwork, inputs: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"inputs must be 2-D, got shape {x.shape}")
    if x.shape[1] != net.input_dim:
        raise ShapeError(f"inputs have {x.shape[1]} columns, network expects {net.input_dim}")
    cache = ForwardCache(net.version, [], [])
    for layer in net.layers:
        cache.inputs.append(x)
        z = x @ layer.weights.T + layer.bias
        cache.pre_activations.append(z)
        x = np.maximum(z, 0.0) if layer.activation == "relu" else z
    return x, cache


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over rows of the squared error summed across output dims.

    Returns the loss and its gradient w.r.t. ``pred``: 2 (pred - target) / n.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {pred.shape} != target shape {target.shape}")
    n = pred.shape[0]
    diff = pred - target
    loss = float(np.sum(diff * diff) / n)
    grad = 2.0 * diff / n
    return loss, grad


def backward(
    net: DenseNetwork, cache: ForwardCache, loss_grad: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Backpropagate ``loss_grad`` (dL/d output) through the network.

    Returns (flat parameter gradient in snapshot order, gradient w.r.t. the
    network inputs). The input gradient is what lets the decoder chain into
    the encoder during autoencoder training.
    """
    if cache.net_version != net.version:
        raise ContractError("forward cache is stale: network weights changed since forward()")
    if len(cache.inputs) != len(net.layers):
        raise ContractError("cache does not match this network's layer count")
    dy = np.asarray(loss_grad, dtype=np.float64)
    if dy.shape != (cache.inputs[-1].shape[0], net.output_dim):
        raise ShapeError(
            f"loss gradient shape {dy.shape} does not match output "
            f"({cache.inputs[-1].shape[0]}, {net.output_dim})"
        )
    grads: list[tuple[np.ndarray, np.ndarray]] = []
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        z = cache.pre_activations[i]
        dz = dy * (z > 0.0) if layer.activation == "relu" else dy
        x = cache.inputs[i]
        dw = dz.T @ x
        db = dz.sum(axis=0)
        dy = dz @ layer.weights
        grads.append((dw, db))
    grads.reverse()
    flat = np.concatenate([np.concatenate([dw.ravel(), db]) for dw, db in grads])
    return flat, dy


@dataclass
class AdamState:
    """Adam optimizer state for one flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_size(cls, n: int, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
            raise ValueError("betas must lie in (0, 1)")
        if lr <= 0.0 or epsilon <= 0.0:
            raise ValueError("lr and epsilon must be positive")
        return cls(np.zeros(n), np.zeros(n), 0, lr, beta1, beta2, epsilon)


def adam_step(
    state: AdamState, weights: np.ndarray, grads: np.ndarray
) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam update. Returns (new state, new weights)."""
    weights = np.asarray(weights, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if weights.shape != grads.shape or weights.shape != state.m.shape:
        raise ShapeError("weights, grads and Adam moments must share one length")
    if not np.isfinite(grads).all():
        raise NumericError("non-finite gradient passed to adam_step")
    t = state.step_count + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_w = weights - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    new_state = AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.epsilon)
    return new_state, new_w


def train_epochs(
    net: DenseNetwork,
    adam: AdamState,
    inputs: np.ndarray,
    targets: np.ndarray,
    epochs: int,
    batch_size: int,
    rng: np.random.Generator,
) -> AdamState:
    """Plain supervised minibatch loop on one network (used for the RUL nets)."""
    n = inputs.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            out, cache = forward(net, inputs[idx])
            _, grad_out = mse_loss(out, targets[idx])
            flat_grad, _ = backward(net, cache, grad_out)
            adam, new_w = adam_step(adam, snapshot(net).values, flat_grad)
            restore(net, WeightSnapshot(new_w, snapshot_spec(net)))
    return adam


def train_autoencoder_epochs(
    encoder: DenseNetwork,
    decoder: DenseNetwork,
    adam_enc: AdamState,
    adam_dec: AdamState,
    inputs: np.ndarray,
    epochs: int,
    batch_size: int,
    rng: np.random.Generator,
) -> tuple[AdamState, AdamState]:
    """Joint reconstruction training: encode, decode, backprop through both."""
    if encoder.output_dim != decoder.input_dim:
        raise ShapeError("decoder input dim must equal encoder bottleneck dim")
    n = inputs.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            batch = inputs[idx]
            code, enc_cache = forward(encoder, batch)
            recon, dec_cache = forward(decoder, code)
            _, grad_out = mse_loss(recon, batch)
            dec_grad, grad_code = backward(decoder, dec_cache, grad_out)
            enc_grad, _ = backward(encoder, enc_cache, grad_code)
            adam_dec, new_dec = adam_step(adam_dec, snapshot(decoder).values, dec_grad)
            adam_enc, new_enc = adam_step(adam_enc, snapshot(encoder).values, enc_grad)
            restore(decoder, WeightSnapshot(new_dec, snapshot_spec(decoder)))
            restore(encoder, WeightSnapshot(new_enc, snapshot_spec(encoder)))
    return adam_enc, adam_dec


def reconstruction_mse(encoder: DenseNetwork, decoder: DenseNetwork,
                       inputs: np.ndarray) -> float:
    code, _ = forward(encoder, inputs)
    recon, _ = forward(decoder, code)
    loss, _ = mse_loss(recon, inputs)
    return loss
