"""The memory tree: a self-organizing key-value store with learned routing.

Memories live in leaves. Every internal node carries a binary router that
sends queries left or right; a single shared scorer ranks the memories of
the leaf a query lands in. Inserts descend while training routers against a
mix of predicted direction and a balance term, leaves split once they exceed
a capacity that grows logarithmically with the store, and an amortized
reroute operation (remove a random memory, re-insert it) repairs the
placement of old memories after routers drift.

Mutating operations (insert / remove / reroute / update) must be externally
serialized; epsilon=0 queries are read-only apart from tie-breaking draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from random import Random
from typing import Any, Iterator, Optional, Union

from .features import SparseVector, fingerprint
from .learners import DEFAULT_BASE_RATE, RouterModel, ScorerModel

LEFT = "left"
RIGHT = "right"


class DuplicateKeyError(ValueError):
    """Inserting a key whose fingerprint is already stored."""


class UnknownKeyError(KeyError):
    """Removing or looking up a key that is not stored."""


class Memory:
    """A stored (key, value) pair. The value payload is task-defined."""

    __slots__ = ("x", "value", "key_fingerprint")

    def __init__(self, x: SparseVector, value: Any):
        self.x = x
        self.value = value
        self.key_fingerprint = fingerprint(x)

    def __repr__(self) -> str:
        return f"Memory(fp={self.key_fingerprint:#x}, value={self.value!r})"


class Leaf:
    __slots__ = ("parent", "mem")

    def __init__(self, parent: Optional["Internal"] = None):
        self.parent = parent
        self.mem: list[Memory] = []

    is_leaf = True


class Internal:
    __slots__ = ("parent", "left", "right", "g", "n")

    def __init__(self, parent: Optional["Internal"], g: RouterModel):
        self.parent = parent
        self.left: Node = None  # wired by the caller
        self.right: Node = None
        self.g = g
        self.n = 0

    is_leaf = False


Node = Union[Leaf, Internal]


def node_count(node: Node) -> int:
    """Memories stored at or below a node."""
    return len(node.mem) if node.is_leaf else node.n


@dataclass(frozen=True)
class PathStep:
    node: Internal
    action: str
    prob: float


@dataclass(frozen=True)
class PathRecord:
    steps: tuple[PathStep, ...]
    leaf: Leaf


@dataclass(frozen=True)
class Deviation:
    """Query explored by flipping the decision at `node` to `action`."""

    node: Internal
    action: str
    prob: float


@dataclass(frozen=True)
class LeafExplore:
    """Query explored by sampling random memories at `leaf`."""

    leaf: Leaf


UpdateKey = Union[None, Deviation, LeafExplore]


@dataclass(frozen=True)
class QueryResult:
    key: UpdateKey
    memories: tuple[Memory, ...]


def reward_difference_estimate(r: float, action: str, prob: float) -> float:
    """Importance-weighted estimate of (reward right) - (reward left).

    Given the reward observed after deviating to `action` with probability
    `prob`, this is unbiased over the uniform action choice.
    """
    scaled = r / prob
    return scaled if action == RIGHT else -scaled


def balance_bound(p: float, alpha: float, T: float = math.inf) -> float:
    """Worst-case partition skew K for a router with progressive error p.

    Each side of the split is guaranteed at least a 1/K fraction of the
    memories. Raises ValueError where the bound is vacuous.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError("p must lie in [0, 1)")
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    numer = 1.0 + math.exp((1.0 - alpha) / alpha)
    denom = (1.0 - p) - (0.0 if math.isinf(T) else numer / T)
    if denom <= 0.0:
        raise ValueError("bound vacuous: (1 - p) must exceed the finite-T correction")
    return numer / denom


def path(x: SparseVector, v: Node) -> PathRecord:
    """Deterministic descent from v: right iff the router score is positive."""
    steps: list[PathStep] = []
    while not v.is_leaf:
        if v.g.raw(x) > 0.0:
            action, child = RIGHT, v.right
        else:
            action, child = LEFT, v.left
        steps.append(PathStep(v, action, 1.0))
        v = child
    return PathRecord(tuple(steps), v)


class Tree:
    """Shared state: root node, scorer, key map, and the balance knobs.

    alpha in (0, 1] weights balance against predicted reward when training
    routers, c scales the leaf capacity c * ln(stored), and d is the number
    of reroute passes run after every insert or update.
    """

    def __init__(
        self,
        alpha: float = 0.9,
        c: float = 4.0,
        d: int = 5,
        scorer: Optional[ScorerModel] = None,
        seed: int = 0,
        base_rate: float = DEFAULT_BASE_RATE,
        replace_duplicates: bool = False,
    ):
        if not 0.0 < alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if not c > 0.0:
            raise ValueError("c must be positive")
        if d < 0:
            raise ValueError("d must be >= 0")
        self.alpha = alpha
        self.c = c
        self.d = d
        self.f = scorer if scorer is not None else ScorerModel()
        self.seed = seed
        self.rng = Random(seed)
        self.base_rate = base_rate
        self.replace_duplicates = replace_duplicates
        self.root: Node = Leaf()
        self.M: dict[int, Leaf] = {}
        # flat fingerprint index for O(1) uniform sampling in reroute
        self._fps: list[int] = []
        self._fp_pos: dict[int, int] = {}

    # -- sizing ------------------------------------------------------------

    def __len__(self) -> int:
        return len(self.M)

    def contains(self, x: SparseVector) -> bool:
        return fingerprint(x) in self.M

    def capacity(self) -> int:
        """Maximum memories per leaf at the current store size."""
        n = max(len(self.M), 2)
        return max(math.ceil(self.c), math.ceil(self.c * math.log(n)))

    def leaves(self) -> Iterator[Leaf]:
        stack: list[Node] = [self.root]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                yield node
            else:
                stack.append(node.left)
                stack.append(node.right)

    def memories(self) -> Iterator[Memory]:
        for leaf in self.leaves():
            yield from leaf.mem

    def max_depth(self) -> int:
        depth = 0
        stack: list[tuple[Node, int]] = [(self.root, 0)]
        while stack:
            node, d = stack.pop()
            if node.is_leaf:
                depth = max(depth, d)
            else:
                stack.append((node.left, d + 1))
                stack.append((node.right, d + 1))
        return depth

    def max_progressive_error(self) -> float:
        """Largest progressive training error over all internal routers."""
        worst = 0.0
        stack: list[Node] = [self.root]
        while stack:
            node = stack.pop()
            if not node.is_leaf:
                if node.g.update_count:
                    worst = max(worst, node.g.progressive_error())
                stack.append(node.left)
                stack.append(node.right)
        return worst

    # -- query -------------------------------------------------------------

    def query(self, x: SparseVector, k: int = 1, epsilon: float = 0.0) -> QueryResult:
        """Return up to k memories and, when exploration fired, an update key."""
        if k < 1:
            raise ValueError("k must be >= 1")
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if not self.M:
            return QueryResult(None, ())
        record = path(x, self.root)
        if epsilon == 0.0 or self.rng.random() >= epsilon:
            return QueryResult(None, tuple(self.top_k(record.leaf, x, k)))
        n_steps = len(record.steps)
        i = int(self.rng.random() * (n_steps + 1))  # uniform on 0..n_steps
        if i < n_steps:
            node = record.steps[i].node
            flipped = RIGHT if self.rng.random() < 0.5 else LEFT
            child = node.right if flipped == RIGHT else node.left
            leaf = path(x, child).leaf
            return QueryResult(Deviation(node, flipped, 0.5), tuple(self.top_k(leaf, x, k)))
        return QueryResult(LeafExplore(record.leaf), tuple(self.rand_k(record.leaf, x, k)))

    def top_k(self, leaf: Leaf, x: SparseVector, k: int) -> list[Memory]:
        """Best-scored min(k, |mem|) memories; exact score ties are shuffled."""
        f = self.f
        scored = sorted(
            ((-f.predict(x, z.x), idx) for idx, z in enumerate(leaf.mem)),
        )
        # permute runs of equal score so ties are broken uniformly
        start = 0
        while start < len(scored):
            end = start + 1
            while end < len(scored) and scored[end][0] == scored[start][0]:
                end += 1
            if end - start > 1:
                self._shuffle_span(scored, start, end)
            start = end
        return [leaf.mem[idx] for _, idx in scored[:k]]

    def rand_k(self, leaf: Leaf, x: SparseVector, k: int) -> list[Memory]:
        """Uniform subset of min(k, |mem|) memories, without replacement."""
        pool = list(leaf.mem)
        take = min(k, len(pool))
        rng = self.rng
        for i in range(take):
            j = i + int(rng.random() * (len(pool) - i))
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:take]

    def _shuffle_span(self, items: list, start: int, end: int) -> None:
        rng = self.rng
        for i in range(end - 1, start, -1):
            j = start + int(rng.random() * (i - start + 1))
            items[i], items[j] = items[j], items[i]

    # -- learning update ---------------------------------------------------

    def update(self, x: SparseVector, z: Memory, r: float, key: UpdateKey) -> None:
        """Credit the randomized decision identified by `key` with reward r.

        A key whose node has since left the tree (possible after reroutes)
        skips the learner update; the amortized reroutes still run.
        """
        if not 0.0 <= r <= 1.0:
            raise ValueError("reward must lie in [0, 1]")
        if isinstance(key, LeafExplore):
            if self._in_tree(key.leaf):
                self.f.update(x, z.x, r)
        elif isinstance(key, Deviation):
            v = key.node
            if self._in_tree(v):
                r_hat = reward_difference_estimate(r, key.action, key.prob)
                balance = math.log(node_count(v.left) + 1) - math.log(node_count(v.right) + 1)
                y = (1.0 - self.alpha) * r_hat + self.alpha * balance
                if y != 0.0:
                    v.g.update(x, 1 if y > 0.0 else -1, abs(y))
        elif key is not None:
            raise TypeError(f"bad update key {key!r}")
        for _ in range(self.d):
            self.reroute()

    def update_scorer_on_exploit(self, x: SparseVector, z: Memory, r: float) -> None:
        """Optional extra credit for non-exploratory returns (off by default)."""
        leaf = self.M.get(z.key_fingerprint)
        self.update(x, z, r, LeafExplore(leaf) if leaf is not None else None)

    def _in_tree(self, node: Node) -> bool:
        while node.parent is not None:
            parent = node.parent
            if parent.left is not node and parent.right is not node:
                return False
            node = parent
        return node is self.root

    # -- insert ------------------------------------------------------------

    def insert(self, z: Memory, d: Optional[int] = None, at: Optional[Node] = None) -> None:
        """Route z to a leaf (training routers on the way) and store it."""
        reroutes = self.d if d is None else d
        if z.key_fingerprint in self.M:
            if not self.replace_duplicates:
                raise DuplicateKeyError(f"key {z.key_fingerprint:#x} already stored")
            self._remove_fp(z.key_fingerprint)
        self._insert_from(self.root if at is None else at, z)
        for _ in range(reroutes):
            self.reroute()

    def _insert_from(self, v: Node, z: Memory) -> None:
        alpha = self.alpha
        x = z.x
        while not v.is_leaf:
            g = v.g
            balance = math.log(node_count(v.left) + 1) - math.log(node_count(v.right) + 1)
            score = (1.0 - alpha) * g.raw(x) + alpha * balance
            g.update(x, 1 if score > 0.0 else -1, 1.0)
            v.n += 1
            v = v.right if g.raw(x) > 0.0 else v.left
        self.insert_leaf(v, z)

    def insert_leaf(self, leaf: Leaf, z: Memory) -> None:
        """Append z to a leaf, splitting the leaf if it outgrew capacity."""
        leaf.mem.append(z)
        self._register(z, leaf)
        if len(leaf.mem) > self.capacity():
            self._split(leaf, protected=z)

    def _register(self, z: Memory, leaf: Leaf) -> None:
        fp = z.key_fingerprint
        self.M[fp] = leaf
        if fp not in self._fp_pos:
            self._fp_pos[fp] = len(self._fps)
            self._fps.append(fp)

    def _split(self, leaf: Leaf, protected: Optional[Memory]) -> None:
        """Promote a leaf to an internal node and redistribute its memories.

        The redistribution trains a fresh router exactly like insert descent
        but never splits the fresh children mid-loop; afterwards, if one
        child ends up empty, the lower-scored half of the other child moves
        over (the memory whose insert triggered the split stays put so its
        own routing stays consistent).
        """
        parent = leaf.parent
        node = Internal(parent, RouterModel(self.base_rate))
        left, right = Leaf(node), Leaf(node)
        node.left, node.right = left, right
        if parent is None:
            self.root = node
        elif parent.left is leaf:
            parent.left = node
        else:
            parent.right = node

        alpha = self.alpha
        g = node.g
        for m in leaf.mem:
            balance = math.log(len(left.mem) + 1) - math.log(len(right.mem) + 1)
            score = (1.0 - alpha) * g.raw(m.x) + alpha * balance
            g.update(m.x, 1 if score > 0.0 else -1, 1.0)
            node.n += 1
            child = right if g.raw(m.x) > 0.0 else left
            child.mem.append(m)
            self.M[m.key_fingerprint] = child

        if not left.mem or not right.mem:
            self._rebalance_empty_child(node, protected)
        cap = self.capacity()
        for child in (left, right):
            if len(child.mem) > cap:
                keep = protected if protected is not None and protected in child.mem else None
                self._split(child, keep)

    def _rebalance_empty_child(self, node: Internal, protected: Optional[Memory]) -> None:
        full, empty = (node.left, node.right) if node.left.mem else (node.right, node.left)
        g = node.g
        candidates = sorted(
            (m for m in full.mem if m is not protected),
            key=lambda m: (g.raw(m.x), m.key_fingerprint),
        )
        move = candidates[: max(1, len(candidates) // 2)]
        moved = {id(m) for m in move}
        full.mem = [m for m in full.mem if id(m) not in moved]
        empty.mem = move
        for m in move:
            self.M[m.key_fingerprint] = empty

    # -- remove ------------------------------------------------------------

    def remove(self, x: SparseVector) -> Memory:
        """Delete the memory stored under x's fingerprint."""
        cap_before = self.capacity()
        z = self._remove_fp(fingerprint(x))
        if self.capacity() < cap_before:
            self._enforce_capacity()
        return z

    def _remove_fp(self, fp: int) -> Memory:
        leaf = self.M.get(fp)
        if leaf is None:
            raise UnknownKeyError(f"key {fp:#x} is not stored")
        del self.M[fp]
        pos = self._fp_pos.pop(fp)
        last = self._fps.pop()
        if last != fp:
            self._fps[pos] = last
            self._fp_pos[last] = pos

        for idx, m in enumerate(leaf.mem):
            if m.key_fingerprint == fp:
                z = leaf.mem.pop(idx)
                break
        else:
            raise AssertionError("key map points at a leaf that lacks the memory")
        node = leaf.parent
        while node is not None:
            node.n -= 1
            node = node.parent
        if not leaf.mem and leaf.parent is not None:
            self._splice(leaf)
        return z

    def _splice(self, leaf: Leaf) -> None:
        # counts above were already decremented; the parent simply vanishes
        parent = leaf.parent
        sibling = parent.right if parent.left is leaf else parent.left
        grand = parent.parent
        sibling.parent = grand
        if grand is None:
            self.root = sibling
        elif grand.left is parent:
            grand.left = sibling
        else:
            grand.right = sibling

    def _enforce_capacity(self) -> None:
        # capacity shrank with the store; split any leaf left over the line
        cap = self.capacity()
        for leaf in [l for l in self.leaves() if len(l.mem) > cap]:
            self._split(leaf, protected=None)

    # -- reroute -----------------------------------------------------------

    def reroute(self) -> None:
        """Extract one uniformly sampled memory and re-insert it from the root."""
        if not self._fps:
            return
        fp = self._fps[int(self.rng.random() * len(self._fps))]
        z = self._remove_fp(fp)
        self._insert_from(self.root, z)

    # -- diagnostics -------------------------------------------------------

    def check_invariants(self) -> list[str]:
        """Structural audit; returns human-readable violations (empty = healthy)."""
        problems: list[str] = []
        cap = self.capacity()
        seen: dict[int, Leaf] = {}

        def walk(node: Node) -> int:
            if node.is_leaf:
                if len(node.mem) > cap:
                    problems.append(f"leaf holds {len(node.mem)} memories, capacity {cap}")
                for m in node.mem:
                    fp = m.key_fingerprint
                    if fp in seen:
                        problems.append(f"fingerprint {fp:#x} stored twice")
                    seen[fp] = node
                    if self.M.get(fp) is not node:
                        problems.append(f"map entry for {fp:#x} does not point at its leaf")
                return len(node.mem)
            for child in (node.left, node.right):
                if child is None:
                    problems.append("internal node with a missing child")
                    return node.n
                if child.parent is not node:
                    problems.append("child's parent link does not point back")
            total = walk(node.left) + walk(node.right)
            if node.n != total:
                problems.append(f"subtree count {node.n} != stored {total}")
            return total

        if self.root.parent is not None:
            problems.append("root has a parent")
        total = walk(self.root)
        if total != len(self.M):
            problems.append(f"map size {len(self.M)} != stored memories {total}")
        for fp in self.M:
            if fp not in seen:
                problems.append(f"map entry {fp:#x} is unreachable from the root")
        if len(self._fps) != len(self.M) or set(self._fps) != set(self.M):
            problems.append("sampling index out of sync with the key map")
        return problems

    def measure_self_consistency(self, sample) -> float:
        """Fraction of sampled memories that a k=1, epsilon=0 query fails to return."""
        sample = list(sample)
        if not sample:
            return 0.0
        misses = 0
        for z in sample:
            got = self.query(z.x, 1, 0.0).memories
            if not got or got[0].key_fingerprint != z.key_fingerprint:
                misses += 1
        return misses / len(sample)
