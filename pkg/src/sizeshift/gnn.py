"""Message-passing models for graph classification: GCN and GIN.

Both models use 3 message-passing layers with batch norm and ReLU
between layers; the last layer ends in tanh so node embeddings are
bounded in (-1, 1), the support the moment-discrepancy regularizer
assumes. The classification head is a 2-layer MLP over mean-pooled
node embeddings. Dropout is applied after the first two layers and
inside the head, never after the bounded embedding layer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graphs import AttributedGraph, CsrAdjacency, build_csr_cached

KINDS = ("gcn", "gin")
NUM_LAYERS = 3
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class BatchNormState:
    """Running per-feature statistics used at eval time."""

    def __init__(self, dim: int):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray):
        self.mean = (1 - BN_MOMENTUM) * self.mean + BN_MOMENTUM * batch_mean
        self.var = (1 - BN_MOMENTUM) * self.var + BN_MOMENTUM * batch_var


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, train: bool) -> Tensor:
    """Normalize per feature over the node dimension of the forward pass."""
    if train:
        mu = ad.row_mean(x)
        var = ad.row_mean(ad.elementwise_pow(x - mu, 2))
        state.update(mu.values.copy(), var.values.copy())
    else:
        mu = Tensor(state.mean)
        var = Tensor(state.var)
    xhat = (x - mu) * ad.reciprocal(ad.sqrt_eps(var, BN_EPS))
    return gamma * xhat + beta


@dataclass
class GraphBatch:
    """Disjoint union of graphs: stacked features plus a merged CSR."""

    features: np.ndarray
    adj: CsrAdjacency
    node_offsets: np.ndarray  # (B+1,)
    labels: np.ndarray  # (B,)


def build_batch(graphs) -> GraphBatch:
    feats = []
    offsets = [0]
    row_offsets = [np.zeros(1, dtype=np.int64)]
    col_chunks = []
    shift = 0
    labels = []
    for g in graphs:
        adj = build_csr_cached(g)
        feats.append(g.features)
        row_offsets.append(adj.row_offsets[1:] + row_offsets[-1][-1])
        col_chunks.append(adj.column_indices + shift)
        shift += g.num_nodes
        offsets.append(shift)
        labels.append(g.label)
    merged = CsrAdjacency(
        row_offsets=np.concatenate(row_offsets),
        column_indices=np.concatenate(col_chunks) if col_chunks else np.zeros(0, np.int64),
    )
    return GraphBatch(
        features=np.vstack(feats),
        adj=merged,
        node_offsets=np.asarray(offsets, dtype=np.int64),
        labels=np.asarray(labels, dtype=np.int64),
    )


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class GnnModel:
    """A 3-layer GCN or GIN with a 2-layer classification head."""

    kind: str
    input_dim: int
    hidden: int
    num_classes: int
    dropout_p: float = 0.3
    params: dict = field(default_factory=dict)
    bn_states: list = field(default_factory=list)
    dropout_rng: np.random.Generator = None

    @classmethod
    def build(cls, kind, input_dim, hidden, num_classes, dropout_p=0.3, seed=0):
        if kind not in KINDS:
            raise ValueError(f"unknown model kind {kind!r}")
        rng = np.random.default_rng([seed, 0])
        m = cls(
            kind=kind,
            input_dim=input_dim,
            hidden=hidden,
            num_classes=num_classes,
            dropout_p=dropout_p,
            dropout_rng=np.random.default_rng([seed, 1]),
        )
        dims = [input_dim] + [hidden] * NUM_LAYERS

        def param(name, values):
            m.params[name] = Tensor(values, requires_grad=True)

        for layer in range(NUM_LAYERS):
            d_in, d_out = dims[layer], dims[layer + 1]
            if kind == "gcn":
                param(f"layer{layer}.W", _glorot(rng, d_in, d_out))
                param(f"layer{layer}.b", np.zeros(d_out))
            else:
                param(f"layer{layer}.eps", np.zeros(()))
                param(f"layer{layer}.W1", _glorot(rng, d_in, d_out))
                param(f"layer{layer}.b1", np.zeros(d_out))
                param(f"layer{layer}.W2", _glorot(rng, d_out, d_out))
                param(f"layer{layer}.b2", np.zeros(d_out))
            if layer < NUM_LAYERS - 1:
                param(f"layer{layer}.bn_gamma", np.ones(d_out))
                param(f"layer{layer}.bn_beta", np.zeros(d_out))
                m.bn_states.append(BatchNormState(d_out))
        param("head.W1", _glorot(rng, hidden, hidden))
        param("head.b1", np.zeros(hidden))
        param("head.W2", _glorot(rng, hidden, num_classes))
        param("head.b2", np.zeros(num_classes))
        return m

    def parameters(self) -> dict:
        return self.params

    def snapshot(self) -> dict:
        state = {name: t.values.copy() for name, t in self.params.items()}
        for i, bn in enumerate(self.bn_states):
            state[f"_bn{i}.mean"] = bn.mean.copy()
            state[f"_bn{i}.var"] = bn.var.copy()
        return state

    def restore(self, state: dict):
        for name, t in self.params.items():
            t.values = state[name].copy()
        for i, bn in enumerate(self.bn_states):
            bn.mean = state[f"_bn{i}.mean"].copy()
            bn.var = state[f"_bn{i}.var"].copy()

    def forward_batch(self, batch: GraphBatch, train: bool = False):
        """Run the message-passing stack on a disjoint-union batch.

        Returns (node_embeddings (N, hidden), logits (B, num_classes)).
        """
        if batch.features.shape[1] != self.input_dim:
            raise ValueError(
                f"feature dim {batch.features.shape[1]} does not match model input {self.input_dim}"
            )
        h = Tensor(batch.features)
        for layer in range(NUM_LAYERS):
            last = layer == NUM_LAYERS - 1
            if self.kind == "gcn":
                h = gcn_layer(
                    h,
                    batch.adj,
                    self.params[f"layer{layer}.W"],
                    self.params[f"layer{layer}.b"],
                    train=train,
                    bn=None if last else (
                        self.params[f"layer{layer}.bn_gamma"],
                        self.params[f"layer{layer}.bn_beta"],
                        self.bn_states[layer],
                    ),
                    last=last,
                    dropout_p=self.dropout_p,
                    rng=self.dropout_rng,
                )
            else:
                h = gin_layer(
                    h,
                    batch.adj,
                    self.params[f"layer{layer}.eps"],
                    (
                        self.params[f"layer{layer}.W1"],
                        self.params[f"layer{layer}.b1"],
                        self.params[f"layer{layer}.W2"],
                        self.params[f"layer{layer}.b2"],
                    ),
                    train=train,
                    bn=None if last else (
                        self.params[f"layer{layer}.bn_gamma"],
                        self.params[f"layer{layer}.bn_beta"],
                        self.bn_states[layer],
                    ),
                    last=last,
                    dropout_p=self.dropout_p,
                    rng=self.dropout_rng,
                )
        embeddings = h
        pooled = ad.segment_mean(embeddings, batch.node_offsets)
        logits = self._head(pooled, train)
        return embeddings, logits

    def _head(self, pooled: Tensor, train: bool) -> Tensor:
        z = ad.relu(pooled @ self.params["head.W1"] + self.params["head.b1"])
        z = ad.dropout(z, self.dropout_p, self.dropout_rng, train)
        return z @ self.params["head.W2"] + self.params["head.b2"]


def gcn_layer(h, adj, weight, bias, train=False, bn=None, last=False, dropout_p=0.0, rng=None):
    """One symmetric-normalized convolution layer.

    Inner layers apply ReLU, then batch norm (when given), then dropout;
    the last layer replaces all of that with tanh.
    """
    z = ad.neighbor_aggregate(h, adj, "sym_norm") @ weight + bias
    if last:
        return ad.tanh(z)
    z = ad.relu(z)
    if bn is not None:
        gamma, beta, state = bn
        z = batch_norm(z, gamma, beta, state, train)
    if train and dropout_p > 0 and rng is not None:
        z = ad.dropout(z, dropout_p, rng, train)
    return z


def gin_layer(h, adj, eps, mlp, train=False, bn=None, last=False, dropout_p=0.0, rng=None):
    """One sum-aggregation layer with a learnable self-loop weight.

    Computes MLP((1 + eps) * h + sum of neighbor rows) where the MLP is
    Linear-ReLU-Linear; inner layers batch-normalize, the last applies
    tanh instead.
    """
    w1, b1, w2, b2 = mlp
    agg = ad.neighbor_aggregate(h, adj, "sum")
    z = (Tensor(1.0) + eps) * h + agg
    z = ad.relu(z @ w1 + b1) @ w2 + b2
    if last:
        return ad.tanh(z)
    if bn is not None:
        gamma, beta, state = bn
        z = batch_norm(z, gamma, beta, state, train)
    if train and dropout_p > 0 and rng is not None:
        z = ad.dropout(z, dropout_p, rng, train)
    return z


def forward(model: GnnModel, graph, train: bool = False):
    """Run one graph, returning (node_embeddings (n, h), logits (C,))."""
    g = graph.graph if hasattr(graph, "graph") else graph
    if not isinstance(g, AttributedGraph):
        raise TypeError("forward expects an AttributedGraph or CoarsenedGraph")
    batch = build_batch([g])
    emb, logits = model.forward_batch(batch, train)
    return emb, logits  # logits has shape (1, num_classes)


# -- checkpoint io ------------------------------------------------------

_CKPT_MAGIC = b"SSCK"
_CKPT_VERSION = 1


def save_checkpoint(model: GnnModel, path) -> None:
    """Write kind, widths, and every named array as raw float64."""
    entries = {name: t.values for name, t in model.params.items()}
    for i, bn in enumerate(model.bn_states):
        entries[f"_bn{i}.mean"] = bn.mean
        entries[f"_bn{i}.var"] = bn.var
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        kind = model.kind.encode()
        fh.write(struct.pack("<I", len(kind)) + kind)
        fh.write(
            struct.pack(
                "<qqqdq",
                model.input_dim,
                model.hidden,
                model.num_classes,
                model.dropout_p,
                len(entries),
            )
        )
        for name in sorted(entries):
            raw = name.encode()
            arr = np.ascontiguousarray(entries[name], dtype=np.float64)
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<q", arr.ndim))
            for s in arr.shape:
                fh.write(struct.pack("<q", s))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> GnnModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _CKPT_MAGIC:
        raise ValueError("not a checkpoint file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 8
    (klen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    kind = data[pos : pos + klen].decode()
    pos += klen
    input_dim, hidden, num_classes, dropout_p, count = struct.unpack_from("<qqqdq", data, pos)
    pos += 40
    entries = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<q", data, pos)
        pos += 8
        shape = []
        for _ in range(ndim):
            (s,) = struct.unpack_from("<q", data, pos)
            pos += 8
            shape.append(s)
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype=np.float64, count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
        entries[name] = arr
    model = GnnModel.build(kind, int(input_dim), int(hidden), int(num_classes), float(dropout_p))
    model.restore(entries)
    return model
