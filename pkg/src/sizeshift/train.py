"""Regularized training: supervised loss plus size-shift regularization.

Each training step runs one forward pass over the disjoint union of the
batch and its precomputed coarsened copies, so gradients flow to the
parameters through both the original and the coarsened embeddings. The
regularization term sums, over every ratio and every batch graph, the
moment discrepancy between the node-embedding distributions of the
graph and its coarsened version.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .coarsen import CoarsenedDatasets, coarsen, _graph_seed
from .gnn import GnnModel, build_batch
from .metrics import CmdConfig, mcc, multi_batched_cmd
from .tudata import class_weights


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one training run."""

    dataset: str = "PROTEINS"
    data_dir: str = "data"
    model: str = "gin"
    hidden: int = 32
    learning_rate: float = 0.001
    batch_size: int = 64
    dropout: float = 0.3
    lam: float = 0.1
    ratios: tuple = (0.8, 0.9)
    coarsener: str = "heavy-edge"
    aggregation: str = "mean"
    max_epochs: int = 200
    patience: int = 0  # 0 disables patience-based halting
    seeds: tuple = (0, 1, 2, 3, 4)
    split_seed: int = 0
    coarsen_seed: int = 0
    cmd_max_moment: int = 5

    def __post_init__(self):
        self.ratios = tuple(float(r) for r in self.ratios)
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.lam < 0:
            raise ValueError("regularization strength must be >= 0")
        for r in self.ratios:
            if not (0.0 < r < 1.0):
                raise ValueError(f"ratio must lie in (0, 1), got {r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        """Hash of all run-defining fields except the seed list."""
        d = self.to_dict()
        d.pop("seeds")
        blob = json.dumps(d, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class RunResult:
    """History and final evaluation of one seeded run."""

    seed: int
    history: dict  # per-epoch lists: train_loss, supervised_loss, reg_loss, val_mcc
    best_epoch: int
    test_mcc: float
    epoch_seconds: list = field(default_factory=list)

    def record(self, config: ExperimentConfig) -> dict:
        """Deterministic JSON-ready form (timings are kept separate)."""
        return {
            "config_hash": config.config_hash(),
            "dataset": config.dataset,
            "model": config.model,
            "lam": config.lam,
            "ratios": list(config.ratios),
            "coarsener": config.coarsener,
            "aggregation": config.aggregation,
            "seed": self.seed,
            "best_epoch": self.best_epoch,
            "test_mcc": self.test_mcc,
            "history": self.history,
        }


class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params: dict, lr: float):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = 0.9, 0.999, 1e-8
        self.m = {k: np.zeros_like(t.values) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.values) for k, t in params.items()}
        self.t = 0

    def step(self, grads: dict):
        self.t += 1
        for name, p in self.params.items():
            g = grads.get(p)
            if g is None:
                continue
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            mhat = self.m[name] / (1 - self.beta1**self.t)
            vhat = self.v[name] / (1 - self.beta2**self.t)
            p.values = p.values - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _coarse_for(cache: CoarsenedDatasets, ratio: float, ids) -> list:
    graphs = cache.per_ratio.get(ratio)
    if graphs is None:
        raise KeyError(f"coarsening cache has no ratio {ratio}")
    return [graphs[i] for i in ids]


def batch_regularization_loss(
    model: GnnModel,
    graphs: list,
    coarsened: dict,
    cmd_cfg: CmdConfig = CmdConfig(),
    train: bool = False,
) -> Tensor:
    """Sum of per-graph discrepancies against every coarsened copy.

    coarsened maps ratio -> list of CoarsenedGraph aligned with graphs.
    Original and coarsened graphs share one forward pass (and one tape),
    so the result is differentiable through both embedding sets.
    """
    ratios = sorted(coarsened)
    for r in ratios:
        if len(coarsened[r]) != len(graphs):
            raise ValueError(f"coarsened list for ratio {r} is not aligned with the batch")
    union = list(graphs) + [cg.graph for r in ratios for cg in coarsened[r]]
    batch = build_batch(union)
    emb, _ = model.forward_batch(batch, train=train)
    return _segment_reg_loss(emb, batch.node_offsets, len(graphs), ratios, cmd_cfg)


def _segment_reg_loss(emb, node_offsets, num_graphs, ratios, cmd_cfg) -> Tensor:
    """Regularization term over a forward pass of originals + coarsened."""
    if not ratios:
        raise ValueError("no coarsening ratios given")
    b = num_graphs
    orig_rows = ad.row_slice(emb, 0, node_offsets[b])
    coarse_rows, coarse_offsets = [], []
    for j, _ in enumerate(ratios):
        lo = node_offsets[b * (j + 1)]
        hi = node_offsets[b * (j + 2)]
        coarse_rows.append(ad.row_slice(emb, lo, hi))
        coarse_offsets.append(node_offsets[b * (j + 1) : b * (j + 2) + 1] - lo)
    return multi_batched_cmd(
        orig_rows, node_offsets[: b + 1], coarse_rows, coarse_offsets, cmd_cfg
    )


def _training_step(model, graphs, coarsened, ratios, lam, weights, cmd_cfg):
    """One fused forward over originals + coarsened copies.

    Returns (total, supervised, reg) loss Tensors on the active tape.
    The supervised term reads only the original graphs' logits.
    """
    b = len(graphs)
    union = list(graphs)
    for r in ratios:
        union.extend(cg.graph for cg in coarsened[r])
    batch = build_batch(union)
    emb, logits = model.forward_batch(batch, train=True)
    labels = batch.labels[:b]
    supervised = ad.weighted_softmax_cross_entropy(ad.row_slice(logits, 0, b), labels, weights)
    if lam > 0 and ratios:
        reg = _segment_reg_loss(emb, batch.node_offsets, b, ratios, cmd_cfg)
        total = supervised + Tensor(lam) * reg
    else:
        reg = Tensor(0.0)
        total = supervised
    return total, supervised, reg


def predict(model: GnnModel, graphs, batch_size: int = 256) -> np.ndarray:
    """Eval-mode argmax predictions for a list of graphs."""
    preds = []
    for lo in range(0, len(graphs), batch_size):
        batch = build_batch(graphs[lo : lo + batch_size])
        _, logits = model.forward_batch(batch, train=False)
        preds.append(logits.values.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate_mcc(model: GnnModel, ds, ids) -> float:
    graphs = [ds.graphs[i] for i in ids]
    preds = predict(model, graphs)
    labels = np.array([g.label for g in graphs])
    return mcc(preds, labels)


def train_single(config: ExperimentConfig, ds, split, cache: CoarsenedDatasets, seed: int) -> RunResult:
    """Train one seeded model and evaluate it once at the best epoch."""
    _, result = fit(config, ds, split, cache, seed)
    return result


def fit(config: ExperimentConfig, ds, split, cache: CoarsenedDatasets, seed: int):
    """Like train_single but also returns the trained (best-epoch) model."""
    if config.lam > 0:
        for r in config.ratios:
            if r not in cache.per_ratio:
                raise KeyError(f"coarsening cache missing ratio {r}")
            if len(cache.per_ratio[r]) != len(ds):
                raise KeyError("coarsening cache does not cover the dataset")
    model = GnnModel.build(
        config.model, ds.feature_dim, config.hidden, ds.num_classes, config.dropout, seed=seed
    )
    optimizer = Adam(model.parameters(), config.learning_rate)
    weights = class_weights(ds, split.train_ids)
    shuffle_rng = np.random.default_rng([seed, 2])
    cmd_cfg = CmdConfig(max_moment=config.cmd_max_moment)
    train_ids = np.asarray(split.train_ids)

    history = {"train_loss": [], "supervised_loss": [], "reg_loss": [], "val_mcc": []}
    epoch_seconds = []
    best_val, best_epoch, best_state = -np.inf, -1, None
    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(len(train_ids))
        sums = np.zeros(3)
        num_batches = 0
        for lo in range(0, len(order), config.batch_size):
            ids = train_ids[order[lo : lo + config.batch_size]]
            graphs = [ds.graphs[i] for i in ids]
            coarsened = (
                {r: _coarse_for(cache, r, ids) for r in config.ratios} if config.lam > 0 else {}
            )
            with Tape():
                total, supervised, reg = _training_step(
                    model, graphs, coarsened, sorted(coarsened), config.lam, weights, cmd_cfg
                )
                if not np.isfinite(total.values):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch} (seed {seed}): "
                        f"supervised={supervised.values}, reg={reg.values}"
                    )
                grads = ad.backward(total)
            optimizer.step(grads)
            sums += (float(total.values), float(supervised.values), float(reg.values))
            num_batches += 1
        epoch_seconds.append(time.perf_counter() - t0)
        val = evaluate_mcc(model, ds, split.val_ids)
        history["train_loss"].append(float(sums[0] / num_batches))
        history["supervised_loss"].append(float(sums[1] / num_batches))
        history["reg_loss"].append(float(sums[2] / num_batches))
        history["val_mcc"].append(float(val))
        if val > best_val:  # ties keep the earliest epoch
            best_val, best_epoch, best_state = val, epoch, model.snapshot()
        if config.patience and epoch - best_epoch >= config.patience:
            break
    model.restore(best_state)
    test = evaluate_mcc(model, ds, split.test_ids)
    result = RunResult(
        seed=seed,
        history=history,
        best_epoch=best_epoch,
        test_mcc=test,
        epoch_seconds=epoch_seconds,
    )
    return model, result


def train(config: ExperimentConfig, ds, split, cache: CoarsenedDatasets) -> list:
    """Run every seed in the config, returning one RunResult per seed."""
    return [train_single(config, ds, split, cache, seed) for seed in config.seeds]


def epoch_overhead(config: ExperimentConfig, ds, split, cache, epochs: int = 5) -> float:
    """Wall-time ratio of regularized to unregularized training epochs.

    Both variants run `epochs` epochs (at least 4 so that three timed
    epochs remain after discarding the warmup).
    """
    if epochs < 4:
        raise ValueError("need at least 4 epochs (1 warmup + 3 timed)")

    def mean_epoch(lam: float) -> float:
        cfg_d = config.to_dict()
        cfg_d.update(lam=lam, max_epochs=epochs, patience=0, seeds=(config.seeds[0],))
        cfg = ExperimentConfig.from_dict(cfg_d)
        result = train_single(cfg, ds, split, cache, cfg.seeds[0])
        return float(np.mean(result.epoch_seconds[1:]))

    reg = mean_epoch(config.lam)
    base = mean_epoch(0.0)
    return reg / base


# -- representation alignment analysis ----------------------------------


@dataclass
class CkaCurves:
    """Alignment versus coarsening ratio for a pair of trained models."""

    ratios: tuple
    between_models: dict  # ratio -> CKA(model_a reps, model_b reps) on coarsened graphs
    between_models_original: float
    within_a: dict  # ratio -> CKA(model_a originals, model_a coarsened)
    within_b: dict


def _graph_representations(model: GnnModel, graphs, batch_size: int = 256) -> np.ndarray:
    """One mean-pooled embedding row per graph (eval mode)."""
    rows = []
    for lo in range(0, len(graphs), batch_size):
        chunk = graphs[lo : lo + batch_size]
        batch = build_batch(chunk)
        emb, _ = model.forward_batch(batch, train=False)
        pooled = ad.segment_mean(emb, batch.node_offsets)
        rows.append(pooled.values)
    return np.vstack(rows)


def cka_analysis(
    model_a: GnnModel,
    model_b: GnnModel,
    graphs,
    ratios=(0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9),
    coarsener: str = "heavy-edge",
    aggregation: str = "mean",
    seed: int = 0,
) -> CkaCurves:
    """Compare representations across models and across coarsening ratios.

    Per-graph representations are mean-pooled node embeddings, so the
    two sides of every comparison have one aligned row per graph even
    though original and coarsened graphs differ in node count.
    """
    from .metrics import linear_cka

    graphs = [g.graph if hasattr(g, "graph") else g for g in graphs]
    reps_a = _graph_representations(model_a, graphs)
    reps_b = _graph_representations(model_b, graphs)
    between = {}
    within_a = {}
    within_b = {}
    for r in ratios:
        coarse = [
            coarsen(g, r, coarsener, aggregation, _graph_seed(seed, i)).graph
            for i, g in enumerate(graphs)
        ]
        ca = _graph_representations(model_a, coarse)
        cb = _graph_representations(model_b, coarse)
        between[r] = linear_cka(ca, cb)
        within_a[r] = linear_cka(reps_a, ca)
        within_b[r] = linear_cka(reps_b, cb)
    return CkaCurves(
        ratios=tuple(ratios),
        between_models=between,
        between_models_original=linear_cka(reps_a, reps_b),
        within_a=within_a,
        within_b=within_b,
    )


# -- results file -------------------------------------------------------


def append_records(path, records: list) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_records(path) -> list:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def aggregate_records(records: list) -> list:
    """Mean and std of test MCC per (dataset, model, regularized) group."""
    groups = {}
    for rec in records:
        key = (rec["dataset"], rec["model"], rec["lam"] > 0)
        groups.setdefault(key, []).append(rec["test_mcc"])
    rows = []
    for (dataset, model, reg), vals in sorted(groups.items()):
        rows.append(
            {
                "dataset": dataset,
                "model": model,
                "regularized": reg,
                "runs": len(vals),
                "mean_mcc": float(np.mean(vals)),
                "std_mcc": float(np.std(vals)),
            }
        )
    return rows
