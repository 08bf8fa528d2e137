"""Seeded synthetic datasets for benchmarks and acceptance runs.

Each generator draws Gaussian cluster centers over a shared token
vocabulary and hashes the resulting (token, value) lists into sparse
vectors, so every dataset is reproducible from (parameters, seed) alone.
Generators are also reachable from the CLI through `synth:` data URIs,
e.g. `synth:multiclass?classes=100&shots=3&noise=0.1`.
"""

from __future__ import annotations

from urllib.parse import parse_qsl, urlparse

import numpy as np

from .features import DEFAULT_BITS, SparseVector, hash_features
from .tasks import MulticlassExample, MultilabelExample, RetrievalPair


def _hash_row(prefix: str, row: np.ndarray, bits: int) -> SparseVector:
    return hash_features([(f"{prefix}{j}", float(v)) for j, v in enumerate(row)], bits)


def random_keys(n: int, dim: int = 16, bits: int = DEFAULT_BITS, seed: int = 0):
    """n independent Gaussian key vectors (unique with probability ~1)."""
    rng = np.random.default_rng(seed)
    rows = rng.normal(0.0, 1.0, (n, dim))
    return [_hash_row("f", row, bits) for row in rows]


def multiclass_clusters(
    classes: int,
    shots: int,
    test_per_class: int = 0,
    dim: int = 16,
    noise: float = 0.1,
    bits: int = DEFAULT_BITS,
    seed: int = 0,
):
    """Gaussian cluster per class; `shots` training and `test_per_class`
    test examples drawn around each center. Returns (train, test) with the
    training stream shuffled across classes."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, 1.0, (classes, dim))

    def draw(y: int) -> MulticlassExample:
        row = centers[y] + noise * rng.normal(0.0, 1.0, dim)
        return MulticlassExample(_hash_row("f", row, bits), y)

    train = [draw(y) for y in range(classes) for _ in range(shots)]
    test = [draw(y) for y in range(classes) for _ in range(test_per_class)]
    order = rng.permutation(len(train))
    return [train[i] for i in order], test


def multilabel_topics(
    examples: int,
    labels: int,
    labels_per_topic: int = 3,
    test_examples: int = 0,
    dim: int = 16,
    noise: float = 0.1,
    bits: int = DEFAULT_BITS,
    seed: int = 0,
):
    """Topic-structured multilabel stream: each topic owns a disjoint block
    of `labels_per_topic` labels and a Gaussian center; an example carries
    its topic's full label block."""
    topics = max(1, labels // labels_per_topic)
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, 1.0, (topics, dim))
    blocks = [
        frozenset(range(t * labels_per_topic, (t + 1) * labels_per_topic))
        for t in range(topics)
    ]

    def draw(n: int) -> list[MultilabelExample]:
        out = []
        for _ in range(n):
            t = int(rng.integers(topics))
            row = centers[t] + noise * rng.normal(0.0, 1.0, dim)
            out.append(MultilabelExample(_hash_row("f", row, bits), blocks[t]))
        return out

    return draw(examples), draw(test_examples)


def retrieval_corpus(
    pairs: int,
    test_pairs: int = 0,
    dim: int = 16,
    noise: float = 0.1,
    bits: int = DEFAULT_BITS,
    seed: int = 0,
):
    """Caption/value pairs sharing a latent vector: the query is a noisy
    view of the value on a separate token namespace, so near queries have
    near (high-cosine) values."""
    rng = np.random.default_rng(seed)

    def draw(n: int) -> list[RetrievalPair]:
        out = []
        for _ in range(n):
            latent = rng.normal(0.0, 1.0, dim)
            query = latent + noise * rng.normal(0.0, 1.0, dim)
            out.append(
                RetrievalPair(_hash_row("q", query, bits), _hash_row("v", latent, bits))
            )
        return out

    return draw(pairs), draw(test_pairs)


_INT_PARAMS = {
    "classes", "shots", "test_per_class", "dim", "examples", "labels",
    "labels_per_topic", "test_examples", "pairs", "test_pairs", "seed",
}
_FLOAT_PARAMS = {"noise"}


def is_synth_uri(uri: str) -> bool:
    return uri.startswith("synth:")


def generate(uri: str, bits: int = DEFAULT_BITS, seed: int = 0):
    """Materialize a `synth:KIND?param=value&...` URI into (train, test).

    KIND is multiclass, multilabel, or retrieval. The run seed is used
    unless the URI carries its own `seed` parameter.
    """
    parsed = urlparse(uri)
    if parsed.scheme != "synth":
        raise ValueError(f"not a synth URI: {uri!r}")
    kind = parsed.path
    params: dict = {"bits": bits, "seed": seed}
    for key, value in parse_qsl(parsed.query):
        if key in _INT_PARAMS:
            params[key] = int(value)
        elif key in _FLOAT_PARAMS:
            params[key] = float(value)
        else:
            raise ValueError(f"unknown synth parameter {key!r}")
    if kind == "multiclass":
        return multiclass_clusters(**params)
    if kind == "multilabel":
        return multilabel_topics(**params)
    if kind == "retrieval":
        return retrieval_corpus(**params)
    raise ValueError(f"unknown synth dataset kind {kind!r}")
