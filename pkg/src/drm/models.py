"""Small networks ``x -> phi(x) -> f(phi(x))`` with a unit-norm feature tap.

The head consumes the normalized features, so what the detector sees is
exactly what the classifier sees.
"""
from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

from . import tensor as tg
from .tensor import Node, Parameter

CHECKPOINT_VERSION = 1


class Model:
    arch: dict

    def __init__(self):
        self.params: list[Parameter] = []

    def _param(self, name: str, value: np.ndarray) -> Node:
        if any(p.name == name for p in self.params):
            raise ValueError(f"duplicate parameter name {name!r}")
        node = Node(value, requires_grad=True, op=name)
        self.params.append(Parameter(node, name))
        return node

    def parameters(self) -> list[Parameter]:
        return self.params

    def nodes(self) -> list[Node]:
        return [p.node for p in self.params if p.trainable]

    def num_parameters(self) -> int:
        return sum(p.node.value.size for p in self.params)

    def features(self, x) -> Node:
        raise NotImplementedError

    def head(self, phi: Node) -> Node:
        raise NotImplementedError

    def forward(self, x) -> tuple[Node, Node]:
        phi = self.features(x)
        return self.head(phi), phi

    def __call__(self, x) -> Node:
        return self.forward(x)[0]

    def predict_logits(self, x, chunk: int = 1000) -> np.ndarray:
        return np.concatenate([self(x[i:i + chunk]).value for i in range(0, len(x), chunk)])

    def feature_values(self, x, chunk: int = 1000) -> np.ndarray:
        return np.concatenate([self.features(x[i:i + chunk]).value for i in range(0, len(x), chunk)])

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.node.value.copy() for p in self.params}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.params:
            if p.name not in state:
                raise KeyError(f"missing parameter {p.name!r}")
            if state[p.name].shape != p.node.shape:
                raise ValueError(f"{p.name}: shape {state[p.name].shape} != {p.node.shape}")
            p.node.value = np.array(state[p.name], dtype=np.float64)


def _glorot(rng, fan_in, fan_out, shape):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, shape)


def _he(rng, fan_in, shape):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)


class MLP(Model):
    """tanh MLP; ``feature_tap`` picks the hidden layer whose activation is phi."""

    def __init__(self, input_dim: int, hidden_dims, num_classes: int = 2,
                 feature_tap: int = -1, seed: int = 0):
        super().__init__()
        hidden_dims = list(hidden_dims)
        if not hidden_dims:
            raise ValueError("MLP needs at least one hidden layer")
        tap = feature_tap % len(hidden_dims) if -len(hidden_dims) <= feature_tap < len(hidden_dims) else None
        if tap is None:
            raise ValueError(f"feature_tap {feature_tap} out of range for {len(hidden_dims)} hidden layers")
        self.tap = tap
        self.arch = {"kind": "mlp", "input_dim": input_dim, "hidden_dims": hidden_dims,
                     "num_classes": num_classes, "feature_tap": feature_tap}
        rng = np.random.default_rng(seed)
        dims = [input_dim] + hidden_dims + [num_classes]
        self.layers = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            w = self._param(f"fc{i}.weight", _glorot(rng, a, b, (a, b)))
            bias = self._param(f"fc{i}.bias", np.zeros(b))
            self.layers.append((w, bias))

    def features(self, x) -> Node:
        h = tg.as_node(x)
        for w, b in self.layers[:self.tap + 1]:
            h = tg.tanh(h @ w + b)
        return tg.l2_normalize(h)

    def head(self, phi: Node) -> Node:
        h = phi
        hidden = self.layers[self.tap + 1:-1]
        for w, b in hidden:
            h = tg.tanh(h @ w + b)
        w, b = self.layers[-1]
        return h @ w + b


class CNN(Model):
    """conv-relu-conv-relu [phi] - maxpool - fc-relu - fc.

    ``feature_tap`` is 2 (after the second conv, the default) or 1 (after the first).
    """

    def __init__(self, input_shape=(3, 14, 14), num_classes: int = 2, channels=(16, 32),
                 hidden: int = 64, feature_tap: int = 2, seed: int = 0):
        super().__init__()
        c, h, w = input_shape
        if h < 8 or w < 8:
            raise ValueError(f"input {input_shape} too small; need H, W >= 8")
        if feature_tap not in (1, 2):
            raise ValueError(f"feature_tap must be 1 or 2, got {feature_tap}")
        self.tap = feature_tap
        self.input_shape = tuple(input_shape)
        self.arch = {"kind": "cnn", "input_shape": list(input_shape), "num_classes": num_classes,
                     "channels": list(channels), "hidden": hidden, "feature_tap": feature_tap}
        rng = np.random.default_rng(seed)
        c1, c2 = channels
        self.conv1 = (self._param("conv1.weight", _he(rng, c * 9, (c1, c, 3, 3))),
                      self._param("conv1.bias", np.zeros(c1)))
        self.conv2 = (self._param("conv2.weight", _he(rng, c1 * 9, (c2, c1, 3, 3))),
                      self._param("conv2.bias", np.zeros(c2)))
        self.map1 = (c1, h - 2, w - 2)
        self.map2 = (c2, h - 4, w - 4)
        flat = c2 * ((h - 4) // 2) * ((w - 4) // 2)
        self.fc1 = (self._param("fc1.weight", _he(rng, flat, (flat, hidden))),
                    self._param("fc1.bias", np.zeros(hidden)))
        self.fc2 = (self._param("fc2.weight", _glorot(rng, hidden, num_classes, (hidden, num_classes))),
                    self._param("fc2.bias", np.zeros(num_classes)))

    def features(self, x) -> Node:
        x = tg.as_node(x)
        if x.shape[1:] != self.input_shape:
            raise tg.ShapeError(f"CNN expects inputs of shape (B, {self.input_shape}), got {x.shape}")
        h = tg.relu(tg.conv2d(x, *self.conv1))
        if self.tap == 2:
            h = tg.relu(tg.conv2d(h, *self.conv2))
        return tg.l2_normalize(tg.reshape(h, (h.shape[0], -1)))

    def head(self, phi: Node) -> Node:
        b = phi.shape[0]
        if self.tap == 1:
            h = tg.relu(tg.conv2d(tg.reshape(phi, (b,) + self.map1), *self.conv2))
        else:
            h = tg.reshape(phi, (b,) + self.map2)
        h = tg.maxpool2d(h, 2)
        h = tg.relu(tg.reshape(h, (b, -1)) @ self.fc1[0] + self.fc1[1])
        return h @ self.fc2[0] + self.fc2[1]


def build_mlp(input_dim: int, hidden_dims=(64, 64), num_classes: int = 2,
              feature_tap: int = -1, seed: int = 0) -> MLP:
    return MLP(input_dim, hidden_dims, num_classes, feature_tap, seed)


def build_cnn(input_shape=(3, 14, 14), num_classes: int = 2, feature_tap: int = 2,
              seed: int = 0, **kw) -> CNN:
    return CNN(tuple(input_shape), num_classes, feature_tap=feature_tap, seed=seed, **kw)


def build_model(arch: dict, seed: int = 0) -> Model:
    arch = dict(arch)
    kind = arch.pop("kind")
    if kind == "mlp":
        return MLP(arch["input_dim"], arch["hidden_dims"], arch["num_classes"], arch["feature_tap"], seed)
    if kind == "cnn":
        return CNN(tuple(arch["input_shape"]), arch["num_classes"], tuple(arch["channels"]),
                   arch["hidden"], arch["feature_tap"], seed)
    raise ValueError(f"unknown model kind {kind!r}")


class Adam:
    def __init__(self, nodes, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.nodes = list(nodes)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = [np.zeros_like(n.value) for n in self.nodes]
        self.v = [np.zeros_like(n.value) for n in self.nodes]
        self.t = 0

    def zero_grad(self) -> None:
        tg.zero_grad(self.nodes)

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        for i, n in enumerate(self.nodes):
            if n.grad is None:
                continue
            self.m[i] = b1 * self.m[i] + (1 - b1) * n.grad
            self.v[i] = b2 * self.v[i] + (1 - b2) * n.grad ** 2
            mhat = self.m[i] / (1 - b1 ** self.t)
            vhat = self.v[i] / (1 - b2 ** self.t)
            n.value = n.value - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def save_checkpoint(path, model: Model, config: dict | None = None) -> None:
    meta = {"version": CHECKPOINT_VERSION, "arch": model.arch, "config": config or {},
            "names": [p.name for p in model.params]}
    arrays = {"__meta__": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    arrays.update({f"param:{p.name}": p.node.value for p in model.params})
    # fixed zip timestamps keep checkpoints byte-reproducible
    with zipfile.ZipFile(path, "w") as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arr))
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_checkpoint(path) -> tuple[Model, dict]:
    with np.load(Path(path)) as z:
        meta = json.loads(z["__meta__"].tobytes().decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        state = {name: z[f"param:{name}"] for name in meta["names"]}
    model = build_model(meta["arch"])
    model.load_state_dict(state)
    return model, meta["config"]
