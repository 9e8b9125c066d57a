"""
Tiny differentiable-function engine: MLPs with explicit reverse-mode gradients and Adam
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.utils.errors import DimensionError, StateError
from src.utils.rng import RngStream

CHECKPOINT_VERSION = 1
ACTIVATIONS = ("relu", "identity")


@dataclass
class Trace:
    """Intermediate activations recorded by one forward pass"""

    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]
    squeeze: bool


class MlpFunction:
    """
    Feed-forward network whose final layer is split into named heads.

    Hidden layers use `activation`; the output layer uses `output_activation`
    (identity unless stated). Weight matrices are stored (fan_in, fan_out).
    """

    def __init__(
        self,
        input_dim: int,
        hidden: Sequence[int],
        heads: Dict[str, int],
        activation: str = "relu",
        output_activation: str = "identity",
        rng: Optional[RngStream] = None,
    ):
        if activation not in ACTIVATIONS or output_activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if not heads:
            raise ValueError("an MlpFunction needs at least one head")
        self.heads: Dict[str, int] = dict(heads)
        self.activation = activation
        self.output_activation = output_activation
        self.layer_sizes = [int(input_dim)] + [int(h) for h in hidden] + [sum(self.heads.values())]
        self.head_slices: Dict[str, slice] = {}
        start = 0
        for name, width in self.heads.items():
            self.head_slices[name] = slice(start, start + width)
            start += width

        rng = rng or RngStream(0)
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform((fan_in, fan_out)) * 2.0 * limit - limit)
            self.biases.append(np.zeros(fan_out))
        self.grad_weights = [np.zeros_like(w) for w in self.weights]
        self.grad_biases = [np.zeros_like(b) for b in self.biases]
        self._trace: Optional[Trace] = None

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> List[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def gradients(self) -> List[np.ndarray]:
        return [g for pair in zip(self.grad_weights, self.grad_biases) for g in pair]

    def zero_grad(self) -> None:
        for g in self.gradients():
            g.fill(0.0)

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def parameter_vector(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def gradient_vector(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.gradients()])

    def set_parameter_vector(self, vector: np.ndarray) -> None:
        vector = np.asarray(vector, dtype=float)
        if vector.size != self.n_parameters():
            raise DimensionError(f"expected {self.n_parameters()} values, got {vector.size}")
        offset = 0
        for p in self.parameters():
            p[...] = vector[offset:offset + p.size].reshape(p.shape)
            offset += p.size

    def _activate(self, a: np.ndarray, kind: str) -> np.ndarray:
        return np.maximum(a, 0.0) if kind == "relu" else a

    def forward_traced(self, x) -> Tuple[Dict[str, np.ndarray], Trace]:
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        h = x[None, :] if squeeze else x
        if h.shape[-1] != self.input_dim:
            raise DimensionError(f"input has {h.shape[-1]} features, network expects {self.input_dim}")
        inputs, pre = [], []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            a = h @ w + b
            pre.append(a)
            kind = self.output_activation if i == self.n_layers - 1 else self.activation
            h = self._activate(a, kind)
        outputs = {}
        for name, sl in self.head_slices.items():
            out = h[:, sl]
            outputs[name] = out[0] if squeeze else out
        return outputs, Trace(inputs, pre, squeeze)

    def forward(self, x) -> Dict[str, np.ndarray]:
        """Evaluate the network; the trace is kept for a following backward()"""
        outputs, self._trace = self.forward_traced(x)
        return outputs

    def backward(self, upstream: Dict[str, np.ndarray], trace: Optional[Trace] = None) -> np.ndarray:
        """
        Accumulate ∂loss/∂parameters in place and return ∂loss/∂input

        Args:
            upstream: gradient of the loss w.r.t. each head (missing heads are zero)
            trace: trace from forward_traced(); defaults to the last forward()
        """
        trace = trace or self._trace
        if trace is None:
            raise StateError("backward() called without a recorded forward pass")
        batch = trace.inputs[0].shape[0]
        grad = np.zeros((batch, self.layer_sizes[-1]))
        for name, g in upstream.items():
            if name not in self.head_slices:
                raise DimensionError(f"unknown head '{name}'")
            g = np.asarray(g, dtype=float)
            grad[:, self.head_slices[name]] += g[None, :] if trace.squeeze else g
        for i in reversed(range(self.n_layers)):
            kind = self.output_activation if i == self.n_layers - 1 else self.activation
            if kind == "relu":
                grad = grad * (trace.pre_activations[i] > 0)
            self.grad_weights[i] += trace.inputs[i].T @ grad
            self.grad_biases[i] += grad.sum(axis=0)
            grad = grad @ self.weights[i].T
        return grad[0] if trace.squeeze else grad

    def copy(self) -> "MlpFunction":
        clone = MlpFunction.__new__(MlpFunction)
        clone.heads = dict(self.heads)
        clone.activation = self.activation
        clone.output_activation = self.output_activation
        clone.layer_sizes = list(self.layer_sizes)
        clone.head_slices = dict(self.head_slices)
        clone.weights = [w.copy() for w in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        clone.grad_weights = [np.zeros_like(w) for w in self.weights]
        clone.grad_biases = [np.zeros_like(b) for b in self.biases]
        clone._trace = None
        return clone

    def spec(self) -> dict:
        return {
            "layer_sizes": self.layer_sizes,
            "heads": self.heads,
            "activation": self.activation,
            "output_activation": self.output_activation,
        }


@dataclass
class AdamState:
    """Adam/ClippedAdam hyperparameters and moment buffers"""

    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: Optional[float] = None
    lr_decay: float = 1.0
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    @property
    def current_lr(self) -> float:
        return self.lr * self.lr_decay ** self.step


def adam_step(state: AdamState, params: List[np.ndarray], grads: List[np.ndarray]) -> List[np.ndarray]:
    """One Adam update (descent on the supplied gradients), in place; returns params"""
    if len(params) != len(grads):
        raise DimensionError("params and grads lists differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")

    lr = state.current_lr
    if state.clip_norm is not None:
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
        if norm > state.clip_norm:
            scale = state.clip_norm / norm
            grads = [g * scale for g in grads]

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return params


class NetworkOptimizer:
    """Adam over the union of parameters of a set of named networks"""

    def __init__(self, networks: Dict[str, MlpFunction], state: AdamState):
        self.networks = networks
        self.state = state

    def params(self) -> List[np.ndarray]:
        return [p for name in sorted(self.networks) for p in self.networks[name].parameters()]

    def grads(self) -> List[np.ndarray]:
        return [g for name in sorted(self.networks) for g in self.networks[name].gradients()]

    def zero_grad(self) -> None:
        for net in self.networks.values():
            net.zero_grad()

    def step(self, scale: float = 1.0) -> None:
        """Descent step on `scale` × accumulated gradients"""
        grads = self.grads()
        if scale != 1.0:
            grads = [g * scale for g in grads]
        adam_step(self.state, self.params(), grads)


def save_checkpoint(path, networks: Dict[str, MlpFunction], metadata: Optional[dict] = None) -> Path:
    """
    Write networks to an .npz archive.

    Layout (version 1): a `__header__` entry holding JSON
    {"version", "metadata", "networks": {name: spec}} and one array per
    parameter named `<network>/W<i>` or `<network>/b<i>`.
    """
    path = Path(path)
    header = {
        "version": CHECKPOINT_VERSION,
        "metadata": metadata or {},
        "networks": {name: net.spec() for name, net in networks.items()},
    }
    arrays = {"__header__": np.array(json.dumps(header))}
    for name, net in networks.items():
        for i, (w, b) in enumerate(zip(net.weights, net.biases)):
            arrays[f"{name}/W{i}"] = w
            arrays[f"{name}/b{i}"] = b
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> Tuple[Dict[str, MlpFunction], dict]:
    with np.load(Path(path), allow_pickle=False) as archive:
        header = json.loads(str(archive["__header__"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise StateError(f"unsupported checkpoint version {header.get('version')}")
        networks = {}
        for name, spec in header["networks"].items():
            sizes = spec["layer_sizes"]
            net = MlpFunction(
                sizes[0], sizes[1:-1], spec["heads"],
                activation=spec["activation"], output_activation=spec["output_activation"],
            )
            for i in range(net.n_layers):
                net.weights[i][...] = archive[f"{name}/W{i}"]
                net.biases[i][...] = archive[f"{name}/b{i}"]
            networks[name] = net
    return networks, header.get("metadata", {})
