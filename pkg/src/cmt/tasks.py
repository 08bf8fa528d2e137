"""Task harnesses that drive the tree as a classifier or retriever.

The multiclass loop follows progressive validation: each example is
predicted before it is learned from. The multilabel loop pairs the tree
with a one-against-some inference layer that only scores labels seen in
the returned memories. The retrieval loop stores (query, value) vector
pairs and scores returns by cosine similarity. An exact linear-scan
nearest-neighbor baseline serves as the reference point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .features import SparseVector, cosine, l2_distance
from .learners import RouterModel
from .tree import Memory, Tree

MODE_ONLINE = "online"
MODE_INSERT_ONLY = "insert_only"


@dataclass(frozen=True)
class MulticlassExample:
    x: SparseVector
    label: int


@dataclass(frozen=True)
class MultilabelExample:
    x: SparseVector
    labels: frozenset[int]


@dataclass(frozen=True)
class RetrievalPair:
    x: SparseVector
    value: SparseVector


def entropy_reduction(p_a: float, p_b: float) -> float:
    """Accuracy gain of predictor A over predictor B, in bits."""
    if p_a <= 0.0 or p_b <= 0.0:
        raise ValueError("accuracies must be positive")
    return math.log2(p_a) - math.log2(p_b)


def f1_reward(truth: frozenset[int] | set[int], returned: frozenset[int] | set[int]) -> float:
    """F1 overlap between a true label set and a returned one; 0 if either is empty."""
    if not truth or not returned:
        return 0.0
    overlap = len(truth & returned)
    return 2.0 * overlap / (len(truth) + len(returned))


def hamming_loss(pred: frozenset[int] | set[int], truth: frozenset[int] | set[int]) -> int:
    """Size of the symmetric difference between prediction and truth."""
    return len(pred ^ truth)


def mc_step(
    t: Tree,
    ex: MulticlassExample,
    epsilon: float,
    mode: str = MODE_ONLINE,
    update_on_exploit: bool = False,
):
    """Query, score with the 0/1 label-match reward, update, then insert.

    Returns (predicted label or None, correct). insert_only mode skips the
    learner update; both modes store the example unless its key is already
    held.
    """
    result = t.query(ex.x, 1, epsilon)
    if result.memories:
        top = result.memories[0]
        predicted = top.value
        correct = predicted == ex.label
        reward = 1.0 if correct else 0.0
        if mode == MODE_ONLINE:
            if result.key is not None:
                t.update(ex.x, top, reward, result.key)
            elif update_on_exploit:
                t.update_scorer_on_exploit(ex.x, top, reward)
    else:
        predicted = None
        correct = False
    if not t.contains(ex.x):
        t.insert(Memory(ex.x, ex.label))
    return predicted, correct


def mc_progressive_run(t: Tree, stream, epsilon: float, window: int = 100, **step_kwargs):
    """Fold mc_step over a stream, testing each example ahead of training.

    Returns (cumulative accuracy, trace) where the trace holds one
    (step, windowed accuracy, cumulative accuracy) row per window.
    """
    hits = 0
    total = 0
    window_hits = 0
    trace: list[tuple[int, float, float]] = []
    for ex in stream:
        _, correct = mc_step(t, ex, epsilon, **step_kwargs)
        total += 1
        hits += correct
        window_hits += correct
        if total % window == 0:
            trace.append((total, window_hits / window, hits / total))
            window_hits = 0
    if total % window:
        span = total % window
        trace.append((total, window_hits / span, hits / total))
    return (hits / total if total else 0.0), trace


def mc_evaluate(t: Tree, stream) -> tuple[float, int]:
    """Read-only pass: epsilon=0 queries, no updates, no inserts."""
    hits = 0
    total = 0
    for ex in stream:
        result = t.query(ex.x, 1, 0.0)
        if result.memories and result.memories[0].value == ex.label:
            hits += 1
        total += 1
    return (hits / total if total else 0.0), total


class OASModel:
    """One-against-some inference over a lazily created scorer per label."""

    def __init__(self, base_rate: float = 0.1):
        self.base_rate = base_rate
        self.scorers: dict[int, RouterModel] = {}

    def score(self, label: int, x: SparseVector) -> float:
        scorer = self.scorers.get(label)
        return scorer.raw(x) if scorer is not None else 0.0

    def predict(self, candidates, x: SparseVector) -> set[int]:
        return {label for label in candidates if self.score(label, x) > 0.0}

    def update(self, candidates, x: SparseVector, truth: frozenset[int]) -> None:
        for label in sorted(candidates):
            scorer = self.scorers.get(label)
            if scorer is None:
                scorer = self.scorers[label] = RouterModel(self.base_rate)
            scorer.update(x, 1 if label in truth else -1, 1.0)


def oas_step(
    t: Tree,
    oas: OASModel,
    ex: MultilabelExample,
    train: bool,
    epsilon: float = 0.1,
):
    """One multilabel round: leaf-sized query, OAS inference over the
    returned labels, then (in training) OAS + tree updates and an insert.

    Returns (predicted label set, candidate label set).
    """
    k = t.capacity()
    result = t.query(ex.x, k, epsilon if train else 0.0)
    candidates: set[int] = set()
    for z in result.memories:
        candidates |= z.value
    predicted = oas.predict(candidates, ex.x)
    if train:
        if candidates:
            oas.update(candidates, ex.x, ex.labels)
        if result.key is not None and result.memories:
            top = result.memories[0]
            t.update(ex.x, top, f1_reward(ex.labels, top.value), result.key)
        if not t.contains(ex.x):
            t.insert(Memory(ex.x, ex.labels))
    return predicted, candidates


def retrieval_step(t: Tree, pair: RetrievalPair, train: bool, epsilon: float = 0.1):
    """One retrieval round. Returns (returned value or None, raw cosine reward).

    The raw cosine is what gets reported; the scorer is trained on its
    (1 + cos) / 2 rescaling so targets stay within [0, 1].
    """
    if not pair.value:
        raise ValueError("retrieval value vector must be nonzero")
    result = t.query(pair.x, 1, epsilon if train else 0.0)
    returned = None
    raw_reward = 0.0
    if result.memories:
        top = result.memories[0]
        returned = top.value
        raw_reward = cosine(returned, pair.value)
        if train and result.key is not None:
            t.update(pair.x, top, (1.0 + raw_reward) / 2.0, result.key)
    if train and not t.contains(pair.x):
        t.insert(Memory(pair.x, pair.value))
    return returned, raw_reward


def nn_linear_scan(store, x: SparseVector, k: int) -> list[Memory]:
    """Exact k-nearest memories by Euclidean key distance, ties by fingerprint."""
    ranked = sorted(store, key=lambda z: (l2_distance(x, z.x), z.key_fingerprint))
    return ranked[:k]
