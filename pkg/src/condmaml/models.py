"""Rectified-linear MLP classifier with named parameter groups.

All hidden layers belong to group ``"emb"``; the final linear layer belongs to
``"cls"``. Parameters persist between graphs as plain arrays and are lifted
onto a graph as differentiable leaves for each computation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

GROUPS = ("emb", "cls")


@dataclass(frozen=True)
class MLPConfig:
    input_dim: int
    hidden_dims: tuple[int, ...]
    n_classes: int
    seed: int = 0
    activation: str = field(default="relu", init=False)

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if not self.hidden_dims or any(h < 1 for h in self.hidden_dims):
            raise ValueError("need at least one hidden layer, all widths positive")
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.n_classes]
        return list(zip(dims[:-1], dims[1:]))

    def entry_layout(self) -> list[tuple[str, str, tuple[int, ...]]]:
        layers = self.layer_dims()
        out = []
        for i, (fan_in, fan_out) in enumerate(layers, start=1):
            group = "cls" if i == len(layers) else "emb"
            out.append((f"W{i}", group, (fan_in, fan_out)))
            out.append((f"b{i}", group, (fan_out,)))
        return out


class ParamSet:
    """Ordered (name, group, node) entries sharing one graph."""

    def __init__(self, config: MLPConfig, entries: list[tuple[str, str, ad.Node]]):
        names = [name for name, _, _ in entries]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self.config = config
        self.entries = list(entries)

    @classmethod
    def from_arrays(cls, config: MLPConfig, arrays: dict[str, np.ndarray], graph=None):
        graph = graph if graph is not None else ad.Graph()
        entries = []
        for name, group, shape in config.entry_layout():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ad.ShapeError(f"{name}: expected shape {shape}, got {arr.shape}")
            entries.append((name, group, graph.leaf(arr, differentiable=True)))
        return cls(config, entries)

    @property
    def graph(self) -> ad.Graph:
        return self.entries[0][2].graph

    @property
    def names(self) -> list[str]:
        return [name for name, _, _ in self.entries]

    @property
    def nodes(self) -> list[ad.Node]:
        return [node for _, _, node in self.entries]

    def __getitem__(self, name: str) -> ad.Node:
        for n, _, node in self.entries:
            if n == name:
                return node
        raise KeyError(name)

    def __len__(self) -> int:
        return len(self.entries)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: node.value.copy() for name, _, node in self.entries}

    def size(self) -> int:
        return sum(node.value.size for node in self.nodes)

    def flatten(self) -> np.ndarray:
        return np.concatenate([node.value.ravel() for node in self.nodes])

    def unflatten(self, flat, graph=None) -> "ParamSet":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size(),):
            raise ad.ShapeError(f"unflatten: expected {self.size()} values, got {flat.shape}")
        arrays, offset = {}, 0
        for name, _, node in self.entries:
            n = node.value.size
            arrays[name] = flat[offset : offset + n].reshape(node.shape)
            offset += n
        return self.fresh(arrays, graph)

    def fresh(self, arrays: dict[str, np.ndarray] | None = None, graph=None) -> "ParamSet":
        """Same layout as differentiable leaves on a new (or given) graph."""
        graph = graph if graph is not None else ad.Graph()
        arrays = arrays if arrays is not None else self.arrays()
        entries = []
        for name, group, node in self.entries:
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != node.shape:
                raise ad.ShapeError(f"{name}: expected shape {node.shape}, got {arr.shape}")
            entries.append((name, group, graph.leaf(arr, differentiable=True)))
        return ParamSet(self.config, entries)

    def replace(self, nodes: list[ad.Node]) -> "ParamSet":
        """Same names and groups, new nodes (e.g. after an update step)."""
        if len(nodes) != len(self.entries):
            raise ValueError("replace: node count mismatch")
        return ParamSet(
            self.config, [(n, g, node) for (n, g, _), node in zip(self.entries, nodes)]
        )


def init(config: MLPConfig, rng: np.random.Generator | None = None) -> ParamSet:
    """Glorot-uniform weights, zero biases."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    arrays = {}
    for name, _, shape in config.entry_layout():
        if name.startswith("W"):
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            arrays[name] = rng.uniform(-limit, limit, size=shape)
        else:
            arrays[name] = np.zeros(shape)
    return ParamSet.from_arrays(config, arrays)


def _add_bias(h: ad.Node, b: ad.Node) -> ad.Node:
    rows = h.shape[0]
    ones = h.graph.const(np.ones((rows, 1)))
    return ad.add(h, ad.matmul(ones, ad.reshape(b, (1, b.shape[0]))))


def forward(params: ParamSet, x) -> ad.Node:
    """Logits of shape [B, n_classes] for a batch ``x`` of shape [B, input_dim]."""
    graph = params.graph
    h = x if isinstance(x, ad.Node) else graph.const(x)
    cfg = params.config
    if h.value.ndim != 2 or h.shape[1] != cfg.input_dim:
        raise ad.ShapeError(f"forward: expected input [B, {cfg.input_dim}], got {h.shape}")
    n_layers = len(cfg.layer_dims())
    for i in range(1, n_layers + 1):
        h = _add_bias(ad.matmul(h, params[f"W{i}"]), params[f"b{i}"])
        if i < n_layers:
            h = ad.relu(h)
    return h


def per_sample_loss(logits: ad.Node, labels) -> ad.Node:
    """Softmax cross-entropy per row, shape [B]."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.value.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ad.ShapeError(
            f"per_sample_loss: logits {logits.shape} vs labels {labels.shape}"
        )
    return ad.softmax_cross_entropy(logits, labels)


def accuracy(logits, labels) -> float:
    values = logits.value if isinstance(logits, ad.Node) else np.asarray(logits)
    return float(np.mean(np.argmax(values, axis=1) == np.asarray(labels)))
