"""Online linear learners: binary routers and the reward scorer.

Both are sparse linear models trained one example at a time with per-feature
adaptive step sizes (accumulated squared gradients). Routers minimize
importance-weighted logistic loss; the scorer regresses rewards in [0, 1]
with squared loss over a pairwise feature map.
"""

from __future__ import annotations

import math

from .features import SparseVector, cosine, dot, l2_distance

DEFAULT_BASE_RATE = 0.1

SCORER_LEARNED = "learned"
SCORER_EUCLIDEAN = "euclidean"

# pair_features namespace: scalar features sit below the offset, the
# elementwise-product block is shifted above it.
PAIR_COSINE = 0
PAIR_DISTANCE = 1
PAIR_BIAS = 2
PAIR_PRODUCT_OFFSET = 4


def sigmoid(t: float) -> float:
    if t >= 0.0:
        return 1.0 / (1.0 + math.exp(-t))
    e = math.exp(t)
    return e / (1.0 + e)


class LinearModel:
    """Sparse weights plus accumulated squared gradients."""

    __slots__ = ("weights", "grad_sq", "base_rate", "update_count", "mistake_count")

    def __init__(self, base_rate: float = DEFAULT_BASE_RATE):
        if not (base_rate > 0.0 and math.isfinite(base_rate)):
            raise ValueError("base_rate must be positive and finite")
        self.weights: dict[int, float] = {}
        self.grad_sq: dict[int, float] = {}
        self.base_rate = base_rate
        self.update_count = 0
        self.mistake_count = 0

    def raw(self, x: SparseVector) -> float:
        w = self.weights
        total = 0.0
        for i, v in zip(x.indices, x.values):
            wi = w.get(i)
            if wi is not None:
                total += wi * v
        return total

    def _step(self, x: SparseVector, dloss_dscore: float) -> None:
        # dloss_dscore is the derivative of the loss wrt the linear score;
        # the per-feature gradient is dloss_dscore * x_i.
        w, g2, rate = self.weights, self.grad_sq, self.base_rate
        for i, v in zip(x.indices, x.values):
            g = dloss_dscore * v
            acc = g2.get(i, 0.0) + g * g
            g2[i] = acc
            w[i] = w.get(i, 0.0) - rate / math.sqrt(acc + 1.0) * g


class RouterModel(LinearModel):
    """Importance-weighted online logistic classifier used at internal nodes."""

    def predict(self, x: SparseVector) -> int:
        """Hard decision in {-1, +1}; a tied score of 0 predicts -1 (left)."""
        return 1 if self.raw(x) > 0.0 else -1

    def update(self, x: SparseVector, y: int, importance: float) -> None:
        """One importance-weighted logistic step toward label y.

        A zero importance leaves all state untouched except the update count.
        The mistake counter compares the post-update prediction with y, so
        mistake_count / update_count is the progressive training error.
        """
        if y not in (-1, 1):
            raise ValueError("label must be -1 or +1")
        if not (importance >= 0.0 and math.isfinite(importance)):
            raise ValueError("importance must be finite and >= 0")
        self.update_count += 1
        if importance == 0.0:
            return
        margin = y * self.raw(x)
        self._step(x, -importance * y * sigmoid(-margin))
        if self.predict(x) != y:
            self.mistake_count += 1

    def progressive_error(self) -> float:
        """Fraction of updates whose post-update prediction disagreed with the label."""
        if self.update_count == 0:
            raise ValueError("progressive error undefined before the first update")
        return self.mistake_count / self.update_count


def router_raw(g: RouterModel, x: SparseVector) -> float:
    return g.raw(x)


def router_update(g: RouterModel, x: SparseVector, y: int, importance: float) -> None:
    g.update(x, y, importance)


def progressive_error(g: RouterModel) -> float:
    return g.progressive_error()


def pair_features(x: SparseVector, key: SparseVector) -> SparseVector:
    """Deterministic feature map for scoring a (query, stored key) pair.

    Concatenates the elementwise product of the two vectors (re-indexed into
    its own namespace) with three scalars: cosine similarity, a bounded
    distance d/(1+d), and a constant bias.
    """
    nx, nk = x.norm(), key.norm()
    sim = 0.0 if nx == 0.0 or nk == 0.0 else dot(x, key) / (nx * nk)
    dist = l2_distance(x, key)

    indices: list[int] = []
    values: list[float] = []
    if sim != 0.0:
        indices.append(PAIR_COSINE)
        values.append(sim)
    if dist != 0.0:
        indices.append(PAIR_DISTANCE)
        values.append(dist / (1.0 + dist))
    indices.append(PAIR_BIAS)
    values.append(1.0)

    ai, av = x.indices, x.values
    bi, bv = key.indices, key.values
    i = j = 0
    na, nb = len(ai), len(bi)
    while i < na and j < nb:
        p, q = ai[i], bi[j]
        if p == q:
            prod = av[i] * bv[j]
            if prod != 0.0:
                indices.append(p + PAIR_PRODUCT_OFFSET)
                values.append(prod)
            i += 1
            j += 1
        elif p < q:
            i += 1
        else:
            j += 1

    vec = SparseVector.__new__(SparseVector)
    vec.indices = tuple(indices)
    vec.values = tuple(values)
    return vec


class ScorerModel(LinearModel):
    """Predicts the reward of returning a stored memory for a query.

    In "learned" mode this is a linear regressor over pair_features with
    predictions clamped to [0, 1]. In "euclidean" mode it is the fixed
    unsupervised score -||x - key||, and updates are ignored.
    """

    __slots__ = ("mode",)

    def __init__(self, mode: str = SCORER_LEARNED, base_rate: float = DEFAULT_BASE_RATE):
        if mode not in (SCORER_LEARNED, SCORER_EUCLIDEAN):
            raise ValueError(f"unknown scorer mode {mode!r}")
        super().__init__(base_rate)
        self.mode = mode

    def predict(self, x: SparseVector, key: SparseVector) -> float:
        if self.mode == SCORER_EUCLIDEAN:
            return -l2_distance(x, key)
        s = self.raw(pair_features(x, key))
        return max(0.0, min(1.0, s))

    def update(self, x: SparseVector, key: SparseVector, r: float) -> None:
        if not (0.0 <= r <= 1.0):
            raise ValueError("reward must lie in [0, 1]")
        if self.mode == SCORER_EUCLIDEAN:
            return
        phi = pair_features(x, key)
        self.update_count += 1
        self._step(phi, self.raw(phi) - r)

    def loss(self, x: SparseVector, key: SparseVector, r: float) -> float:
        """Squared loss on the raw (unclamped) score; gradient() differentiates this."""
        e = self.raw(pair_features(x, key)) - r
        return 0.5 * e * e

    def gradient(self, x: SparseVector, key: SparseVector, r: float) -> dict[int, float]:
        """Per-feature analytic gradient of loss() at the current weights."""
        phi = pair_features(x, key)
        e = self.raw(phi) - r
        return {i: e * v for i, v in zip(phi.indices, phi.values)}
