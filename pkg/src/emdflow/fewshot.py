"""Episodic few-shot evaluation on top of the EMD similarity.

Covers episode sampling from a labeled collection, 1-shot classification,
the k-shot variants (nearest support, score fusion, set merging, global
prototypes, and the learnable structured-FC layer fine-tuned by SGD), and
a toy end-to-end trainer for a linear projection placed before the metric.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_io import LabeledSetCollection
from .metric import (EmbeddingSet, ExtractionConfig, extract, extract_pyramid,
                     pair_similarity, similarity_node_grads)

KSHOT_METHODS = ("sfc", "nn", "fusion", "merge", "prototype")


class InsufficientDataError(ValueError):
    """Collection cannot supply the requested episode shape."""


class DivergenceError(RuntimeError):
    """Optimization produced a non-finite loss."""

    def __init__(self, iteration: int):
        super().__init__(f"loss became non-finite at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class Episode:
    """One N-way K-shot task: labeled support and query embedding sets."""

    n_way: int
    k_shot: int
    q_per_class: int
    support: tuple
    query: tuple

    def __post_init__(self):
        object.__setattr__(self, "support", tuple(self.support))
        object.__setattr__(self, "query", tuple(self.query))
        if len(self.support) != self.n_way * self.k_shot:
            raise ValueError("support size mismatch")
        if len(self.query) != self.n_way * self.q_per_class:
            raise ValueError("query size mismatch")
        for label, _ in (*self.support, *self.query):
            if not (0 <= label < self.n_way):
                raise ValueError(f"label {label} outside [0, {self.n_way})")

    def support_by_class(self):
        out = [[] for _ in range(self.n_way)]
        for label, es in self.support:
            out[label].append(es)
        return out


@dataclass
class SfcPrototypes:
    """Learnable per-class node groups produced by SGD fine-tuning."""

    per_class: list
    learning_rate: float = 0.1
    batch_size: int = 5
    iterations: int = 100
    loss_curve: list = field(default_factory=list)

    @property
    def n_way(self) -> int:
        return len(self.per_class)


@dataclass
class ProjectionModel:
    """Linear map applied to every node vector before the metric."""

    weight: np.ndarray
    temperature: float = 0.1
    loss_curve: list = field(default_factory=list)

    def apply(self, es: EmbeddingSet) -> EmbeddingSet:
        return EmbeddingSet(vectors=es.vectors @ self.weight, source_tag=es.source_tag)


def extract_set(tensor, cfg: ExtractionConfig) -> EmbeddingSet:
    if cfg.pyramid_levels:
        return extract_pyramid(tensor, cfg.pyramid_levels)
    return extract(tensor, cfg)


def sample_episode(col: LabeledSetCollection, n_way: int, k_shot: int,
                   q_per_class: int, seed: int,
                   cfg: ExtractionConfig = ExtractionConfig()) -> Episode:
    """Draw an N-way K-shot episode, deterministic under ``seed``.

    Classes and per-class sets are sampled without replacement; sampled
    classes are relabeled 0..n_way-1 in draw order.
    """
    rng = np.random.default_rng(seed)
    by_class = col.by_class()
    need = k_shot + q_per_class
    eligible = sorted(c for c, sets in by_class.items() if len(sets) >= need)
    if len(eligible) < n_way:
        raise InsufficientDataError(
            f"need {n_way} classes with >= {need} sets each, found {len(eligible)}"
        )
    chosen = rng.choice(eligible, size=n_way, replace=False)
    support, query = [], []
    for new_label, cls in enumerate(chosen):
        sets = by_class[int(cls)]
        idx = rng.choice(len(sets), size=need, replace=False)
        for i in idx[:k_shot]:
            support.append((new_label, extract_set(sets[i], cfg)))
        for i in idx[k_shot:]:
            query.append((new_label, extract_set(sets[i], cfg)))
    return Episode(n_way=n_way, k_shot=k_shot, q_per_class=q_per_class,
                   support=tuple(support), query=tuple(query))


def _predict(similarities) -> int:
    """Argmax with ties broken by lowest class id."""
    sims = np.asarray(similarities, dtype=float)
    return int(np.argmax(sims))


def classify_1shot(ep: Episode, weighting: str = "cross_reference",
                   solver: str = "simplex"):
    """Assign each query the class of the most similar support set.

    Returns (predictions, accuracy).
    """
    if ep.k_shot != 1:
        raise ValueError(f"classify_1shot requires k_shot = 1, got {ep.k_shot}")
    supports = [sets[0] for sets in ep.support_by_class()]
    preds = np.empty(len(ep.query), dtype=int)
    hits = 0
    for qi, (label, q) in enumerate(ep.query):
        sims = [pair_similarity(q, s, weighting=weighting, solver=solver)[0]
                for s in supports]
        preds[qi] = _predict(sims)
        hits += int(preds[qi] == label)
    return preds, hits / len(ep.query)


def _global_mean(es: EmbeddingSet) -> np.ndarray:
    return es.vectors.mean(axis=0)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def fit_sfc(ep: Episode, learning_rate: float = 0.1, batch_size: int = 5,
            iterations: int = 100, temperature: float = 0.1, seed: int = 0,
            solver: str = "simplex") -> SfcPrototypes:
    """Fine-tune per-class prototype node groups on the support set.

    Prototypes start as the node-wise mean of each class's support node
    matrices and are optimized by plain SGD on the cross-entropy of
    temperature-scaled similarities, sampling support minibatches with
    replacement.
    """
    if ep.k_shot < 1:
        raise ValueError("fit_sfc requires k_shot >= 1")
    groups = ep.support_by_class()
    protos = [np.mean([es.vectors for es in sets], axis=0) for sets in groups]
    rng = np.random.default_rng(seed)
    result = SfcPrototypes(per_class=protos, learning_rate=learning_rate,
                           batch_size=batch_size, iterations=iterations)
    support = list(ep.support)
    for it in range(iterations):
        picks = rng.integers(0, len(support), size=batch_size)
        grads = [np.zeros_like(p) for p in protos]
        batch_loss = 0.0
        for pick in picks:
            label, es = support[pick]
            sims = np.empty(ep.n_way)
            proto_grads = []
            for c, proto in enumerate(protos):
                sim, _, _, g_proto = similarity_node_grads(
                    es, EmbeddingSet(vectors=proto), solver=solver)
                sims[c] = sim
                proto_grads.append(g_proto)
            probs = _softmax(sims / temperature)
            batch_loss -= float(np.log(max(probs[label], 1e-300)))
            for c in range(ep.n_way):
                coeff = (probs[c] - (1.0 if c == label else 0.0)) / temperature
                grads[c] += coeff * proto_grads[c]
        batch_loss /= batch_size
        if not np.isfinite(batch_loss):
            raise DivergenceError(it)
        result.loss_curve.append(batch_loss)
        for c in range(ep.n_way):
            protos[c] -= learning_rate * grads[c] / batch_size
    return result


def support_cross_entropy(ep: Episode, protos, temperature: float = 0.1,
                          solver: str = "simplex") -> float:
    """Mean cross-entropy of the full support set against prototypes."""
    total = 0.0
    for label, es in ep.support:
        sims = np.array([pair_similarity(es, EmbeddingSet(vectors=p), solver=solver)[0]
                         for p in protos])
        probs = _softmax(sims / temperature)
        total -= float(np.log(max(probs[label], 1e-300)))
    return total / len(ep.support)


def classify_kshot(ep: Episode, method: str = "sfc", solver: str = "simplex",
                   sfc_kwargs: dict = None) -> float:
    """Accuracy of a k-shot classification rule on the episode's queries."""
    if method not in KSHOT_METHODS:
        raise ValueError(f"unknown method {method!r}")
    groups = ep.support_by_class()

    if method == "sfc":
        fitted = fit_sfc(ep, solver=solver, **(sfc_kwargs or {}))
        refs = [EmbeddingSet(vectors=p) for p in fitted.per_class]
        score = lambda q, c: pair_similarity(q, refs[c], solver=solver)[0]
    elif method == "merge":
        merged = [EmbeddingSet(vectors=np.concatenate([es.vectors for es in sets]))
                  for sets in groups]
        score = lambda q, c: pair_similarity(q, merged[c], solver=solver)[0]
    elif method == "prototype":
        means = [np.mean([_global_mean(es) for es in sets], axis=0) for sets in groups]

        def score(q, c):
            qm = _global_mean(q)
            denom = np.linalg.norm(qm) * np.linalg.norm(means[c])
            return float(qm @ means[c] / denom) if denom > 0 else 0.0
    elif method == "nn":
        score = lambda q, c: max(pair_similarity(q, s, solver=solver)[0]
                                 for s in groups[c])
    else:  # fusion: total similarity across the class's supports
        score = lambda q, c: sum(pair_similarity(q, s, solver=solver)[0]
                                 for s in groups[c])

    hits = 0
    for label, q in ep.query:
        sims = [score(q, c) for c in range(ep.n_way)]
        hits += int(_predict(sims) == label)
    return hits / len(ep.query)


def episode_loss_and_grad(weight: np.ndarray, ep: Episode,
                          temperature: float = 0.1, solver: str = "simplex"):
    """Query cross-entropy with the projection applied, plus d loss / d weight.

    Supports and queries are projected node-wise; the gradient chains the
    similarity's node gradients back through the shared linear map.
    """
    weight = np.asarray(weight, dtype=float)
    supports = [sets[0] for sets in ep.support_by_class()]
    proj_sup = [EmbeddingSet(vectors=s.vectors @ weight) for s in supports]
    grad = np.zeros_like(weight)
    loss = 0.0
    for label, q in ep.query:
        pq = EmbeddingSet(vectors=q.vectors @ weight)
        sims = np.empty(ep.n_way)
        pair_grads = []
        for c in range(ep.n_way):
            sim, _, gq, gs = similarity_node_grads(pq, proj_sup[c], solver=solver)
            sims[c] = sim
            pair_grads.append((gq, gs))
        probs = _softmax(sims / temperature)
        loss -= float(np.log(max(probs[label], 1e-300)))
        for c in range(ep.n_way):
            coeff = (probs[c] - (1.0 if c == label else 0.0)) / temperature
            gq, gs = pair_grads[c]
            grad += coeff * (q.vectors.T @ gq + supports[c].vectors.T @ gs)
    n = len(ep.query)
    return loss / n, grad / n


def train_projection(train_col: LabeledSetCollection, epochs: int = 20,
                     lr: float = 0.05, temperature: float = 0.1, seed: int = 0,
                     n_way: int = 5, k_shot: int = 1, q_per_class: int = 1,
                     cfg: ExtractionConfig = ExtractionConfig(),
                     out_dim: int = None, solver: str = "simplex") -> ProjectionModel:
    """Fit the node projection by SGD over sampled 1-shot episodes."""
    channels = train_col.channels
    if channels is None:
        raise InsufficientDataError("empty collection")
    out_dim = out_dim or channels
    rng = np.random.default_rng(seed)
    weight = np.eye(channels, out_dim) + 0.01 * rng.standard_normal((channels, out_dim))
    model = ProjectionModel(weight=weight, temperature=temperature)
    for epoch in range(epochs):
        ep = sample_episode(train_col, n_way, k_shot, q_per_class,
                            seed=int(rng.integers(0, 2**63)), cfg=cfg)
        loss, grad = episode_loss_and_grad(model.weight, ep, temperature, solver)
        if not np.isfinite(loss):
            raise DivergenceError(epoch)
        model.loss_curve.append(loss)
        if lr != 0.0:
            model.weight = model.weight - lr * grad
    return model


def mean_ci95(values) -> tuple:
    """Mean with the 95% confidence half-width 1.96 * std / sqrt(E)."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return float("nan"), float("nan")
    return float(arr.mean()), float(1.96 * arr.std() / np.sqrt(arr.size))
