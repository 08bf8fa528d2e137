"""Train / test / ablate / bench drivers behind the CLI.

Metrics written to the --metrics file are deterministic for a fixed seed
and config (byte-identical across reruns); anything wall-clock derived
(latencies, durations, bench timing columns) is reported on stdout or in
explicitly timing-labelled columns instead.
"""

from __future__ import annotations

import json
import math
import statistics
import sys
import time
from dataclasses import asdict, dataclass
from hashlib import blake2b
from pathlib import Path
from typing import Optional

from .features import (
    DEFAULT_BITS,
    MODE_MULTICLASS,
    MODE_MULTILABEL,
    ParseError,
    parse_line,
)
from .learners import SCORER_LEARNED, ScorerModel
from .snapshot import SnapshotError, snapshot_load_full, snapshot_save
from .synth import generate as synth_generate, is_synth_uri
from .tasks import (
    MulticlassExample,
    MultilabelExample,
    OASModel,
    RetrievalPair,
    entropy_reduction,
    f1_reward,
    hamming_loss,
    mc_progressive_run,
    oas_step,
    retrieval_step,
)
from .tree import Memory, Tree, balance_bound


class DataError(RuntimeError):
    """Unreadable or malformed input data."""


@dataclass
class RunConfig:
    """Everything a command needs; defaults follow the documented profile."""

    mode: str = MODE_MULTICLASS
    alpha: float = 0.9
    c: float = 4.0
    d: int = 5
    epsilon: float = 0.1
    k: int = 1
    passes_unsup: int = 1
    passes_sup: int = 1
    hash_bits: int = DEFAULT_BITS
    seed: int = 0
    scorer_mode: str = SCORER_LEARNED
    update_on_exploit: bool = False
    replace_duplicates: bool = False
    data: Optional[str] = None
    snapshot: Optional[str] = None
    metrics: Optional[str] = None

    def run_id(self) -> str:
        payload = asdict(self)
        payload.pop("snapshot", None)  # output locations don't identify a run
        payload.pop("metrics", None)
        blob = json.dumps(payload, sort_keys=True).encode("utf-8")
        return blake2b(blob, digest_size=6).hexdigest()

    def build_tree(self) -> Tree:
        return Tree(
            alpha=self.alpha,
            c=self.c,
            d=self.d,
            scorer=ScorerModel(mode=self.scorer_mode),
            seed=self.seed,
            replace_duplicates=self.replace_duplicates,
        )


@dataclass
class MetricRecord:
    run_id: str
    phase: str
    step: int
    metric: str
    value: float


class MetricLog:
    def __init__(self, run_id: str):
        self.run_id = run_id
        self.records: list[MetricRecord] = []

    def add(self, phase: str, step: int, metric: str, value: float) -> None:
        self.records.append(MetricRecord(self.run_id, phase, step, metric, value))

    def write(self, path: Optional[str]) -> None:
        if path is None:
            return
        lines = ["run_id\tphase\tstep\tmetric\tvalue"]
        for r in self.records:
            lines.append(f"{r.run_id}\t{r.phase}\t{r.step}\t{r.metric}\t{r.value!r}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(config: RunConfig):
    """Resolve --data into (train, test) example lists.

    A plain path is parsed under the mode grammar (and yields no test
    split); a synth: URI materializes both splits.
    """
    if config.data is None:
        raise DataError("no --data source given")
    if is_synth_uri(config.data):
        try:
            return synth_generate(config.data, bits=config.hash_bits, seed=config.seed)
        except (ValueError, TypeError) as exc:
            raise DataError(f"bad synth URI {config.data!r}: {exc}") from exc
    try:
        text = Path(config.data).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {config.data!r}: {exc}") from exc
    examples = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        try:
            line = parse_line(raw, config.mode, bits=config.hash_bits, lineno=lineno)
        except ParseError as exc:
            raise DataError(f"{config.data}: {exc}") from exc
        if config.mode == MODE_MULTICLASS:
            examples.append(MulticlassExample(line.right_block, line.label))
        elif config.mode == MODE_MULTILABEL:
            examples.append(MultilabelExample(line.right_block, line.labels))
        else:
            examples.append(RetrievalPair(line.left_block(config.hash_bits), line.right_block))
    return examples, []


def _example_memory(config: RunConfig, ex) -> Memory:
    if config.mode == MODE_MULTICLASS:
        return Memory(ex.x, ex.label)
    if config.mode == MODE_MULTILABEL:
        return Memory(ex.x, ex.labels)
    return Memory(ex.x, ex.value)


def cmd_train(config: RunConfig) -> dict:
    """Insert-only passes, then supervised passes, then snapshot + metrics."""
    train, _ = load_dataset(config)
    tree = config.build_tree()
    oas = OASModel() if config.mode == MODE_MULTILABEL else None
    log = MetricLog(config.run_id())
    started = time.perf_counter()

    for p in range(1, config.passes_unsup + 1):
        phase = f"unsup_pass_{p}"
        inserted = 0
        for ex in train:
            z = _example_memory(config, ex)
            if z.key_fingerprint not in tree.M:
                tree.insert(z)
                inserted += 1
        log.add(phase, len(train), "examples", float(len(train)))
        log.add(phase, len(train), "inserted", float(inserted))
        log.add(phase, len(train), "stored", float(len(tree)))

    for p in range(1, config.passes_sup + 1):
        phase = f"sup_pass_{p}"
        if config.mode == MODE_MULTICLASS:
            accuracy, trace = mc_progressive_run(
                tree, train, config.epsilon, update_on_exploit=config.update_on_exploit
            )
            for step, window_acc, cum_acc in trace:
                log.add(phase, step, "window_accuracy", window_acc)
                log.add(phase, step, "cumulative_accuracy", cum_acc)
            log.add(phase, len(train), "progressive_accuracy", accuracy)
        elif config.mode == MODE_MULTILABEL:
            loss_total = 0
            reward_total = 0.0
            for ex in train:
                predicted, _ = oas_step(tree, oas, ex, train=True, epsilon=config.epsilon)
                loss_total += hamming_loss(predicted, ex.labels)
                reward_total += f1_reward(ex.labels, predicted)
            if train:
                log.add(phase, len(train), "progressive_hamming_loss", loss_total / len(train))
                log.add(phase, len(train), "progressive_f1", reward_total / len(train))
        else:
            reward_total = 0.0
            for ex in train:
                _, reward = retrieval_step(tree, ex, train=True, epsilon=config.epsilon)
                reward_total += reward
            if train:
                log.add(phase, len(train), "progressive_cosine", reward_total / len(train))
        log.add(phase, len(train), "stored", float(len(tree)))

    elapsed = time.perf_counter() - started
    if config.snapshot:
        snapshot_save(
            tree,
            config.snapshot,
            config=asdict(config),
            label_scorers=oas.scorers if oas else None,
        )
    log.write(config.metrics)
    summary = {
        "stored": len(tree),
        "max_depth": tree.max_depth(),
        "train_seconds": elapsed,
    }
    print(
        f"train[{config.mode}] stored={summary['stored']} depth={summary['max_depth']} "
        f"time={elapsed:.2f}s"
    )
    return summary


def cmd_test(config: RunConfig) -> dict:
    """Read-only epsilon=0 evaluation of a snapshot against --data."""
    if not config.snapshot:
        raise DataError("test requires --snapshot")
    tree, saved_config, label_scorers = snapshot_load_full(config.snapshot)
    if saved_config:
        saved_mode = saved_config.get("mode", config.mode)
        if saved_mode != config.mode:
            raise SnapshotError(
                f"snapshot was trained in mode {saved_mode!r}, requested {config.mode!r}"
            )
        config.hash_bits = saved_config.get("hash_bits", config.hash_bits)
    train, test = load_dataset(config)
    if not test:
        test = train  # plain files carry no split: evaluate the file itself

    log = MetricLog(config.run_id())
    latencies: list[float] = []
    summary: dict = {"examples": len(test)}

    if config.mode == MODE_MULTICLASS:
        hits = 0
        majority: dict[int, int] = {}
        for ex in test:
            majority[ex.label] = majority.get(ex.label, 0) + 1
            t0 = time.perf_counter()
            result = tree.query(ex.x, 1, 0.0)
            latencies.append(time.perf_counter() - t0)
            if result.memories and result.memories[0].value == ex.label:
                hits += 1
        accuracy = hits / len(test) if test else 0.0
        summary["accuracy"] = accuracy
        summary["error_percent"] = 100.0 * (1.0 - accuracy)
        log.add("test", len(test), "accuracy", accuracy)
        log.add("test", len(test), "error_percent", summary["error_percent"])
        if test:
            constant = max(majority.values()) / len(test)
            log.add("test", len(test), "constant_accuracy", constant)
            if accuracy > 0.0:
                gain = entropy_reduction(accuracy, constant)
                summary["entropy_reduction_bits"] = gain
                log.add("test", len(test), "entropy_reduction_bits", gain)
    elif config.mode == MODE_MULTILABEL:
        oas = OASModel()
        oas.scorers = dict(label_scorers)
        loss_total = 0
        for ex in test:
            t0 = time.perf_counter()
            predicted, _ = oas_step(tree, oas, ex, train=False)
            latencies.append(time.perf_counter() - t0)
            loss_total += hamming_loss(predicted, ex.labels)
        mean_loss = loss_total / len(test) if test else 0.0
        summary["mean_hamming_loss"] = mean_loss
        log.add("test", len(test), "mean_hamming_loss", mean_loss)
    else:
        reward_total = 0.0
        for ex in test:
            t0 = time.perf_counter()
            _, reward = retrieval_step(tree, ex, train=False)
            latencies.append(time.perf_counter() - t0)
            reward_total += reward
        mean_reward = reward_total / len(test) if test else 0.0
        summary["mean_cosine"] = mean_reward
        log.add("test", len(test), "mean_cosine", mean_reward)

    log.write(config.metrics)
    if latencies:
        mean_ms = 1000.0 * statistics.fmean(latencies)
        p99_ms = 1000.0 * sorted(latencies)[max(0, math.ceil(0.99 * len(latencies)) - 1)]
        summary["latency_ms_mean"] = mean_ms
        summary["latency_ms_p99"] = p99_ms
        print(f"test[{config.mode}] examples={len(test)} "  # timing stays off the metrics file
              f"latency_ms mean={mean_ms:.4f} p99={p99_ms:.4f}")
    else:
        print(f"test[{config.mode}] examples=0")
    for key in ("accuracy", "error_percent", "entropy_reduction_bits",
                "mean_hamming_loss", "mean_cosine"):
        if key in summary:
            print(f"  {key} = {summary[key]}")
    return summary


ABLATE_PARAMS = ("d", "c", "shots", "passes")


def cmd_ablate(config: RunConfig, param: str, values: list) -> list[dict]:
    """Sweep one knob, one full train+test per value; returns the table rows."""
    if param not in ABLATE_PARAMS:
        raise ValueError(f"param must be one of {ABLATE_PARAMS}")
    if not values:
        raise ValueError("ablate needs at least one value")
    rows: list[dict] = []
    for value in values:
        cfg = RunConfig(**asdict(config))
        cfg.snapshot = None
        cfg.metrics = None
        if param == "d":
            cfg.d = int(value)
        elif param == "c":
            cfg.c = float(value)
        elif param == "passes":
            cfg.passes_sup = int(value)
        else:
            if not (cfg.data and is_synth_uri(cfg.data)):
                raise DataError("a shots sweep needs a synth:multiclass data URI")
            sep = "&" if "?" in cfg.data else "?"
            cfg.data = f"{cfg.data}{sep}shots={int(value)}"

        train, test = load_dataset(cfg)
        tree = cfg.build_tree()
        oas = OASModel() if cfg.mode == MODE_MULTILABEL else None
        for _ in range(cfg.passes_unsup):
            for ex in train:
                z = _example_memory(cfg, ex)
                if z.key_fingerprint not in tree.M:
                    tree.insert(z)
        for _ in range(cfg.passes_sup):
            if cfg.mode == MODE_MULTICLASS:
                mc_progressive_run(tree, train, cfg.epsilon)
            elif cfg.mode == MODE_MULTILABEL:
                for ex in train:
                    oas_step(tree, oas, ex, train=True, epsilon=cfg.epsilon)
            else:
                for ex in train:
                    retrieval_step(tree, ex, train=True, epsilon=cfg.epsilon)

        self_consistency = tree.measure_self_consistency(tree.memories())
        row = {
            "param": param,
            "value": value,
            "stored": len(tree),
            "self_consistency_error": self_consistency,
        }
        probe = test or train
        if probe:
            t0 = time.perf_counter()
            if cfg.mode == MODE_MULTICLASS:
                hits = sum(
                    1
                    for ex in probe
                    if (res := tree.query(ex.x, 1, 0.0)).memories
                    and res.memories[0].value == ex.label
                )
                row["test_accuracy"] = hits / len(probe)
                row["test_error_percent"] = 100.0 * (1.0 - row["test_accuracy"])
            elif cfg.mode == MODE_MULTILABEL:
                row["mean_hamming_loss"] = statistics.fmean(
                    hamming_loss(oas_step(tree, oas, ex, train=False)[0], ex.labels)
                    for ex in probe
                )
            else:
                row["mean_cosine"] = statistics.fmean(
                    retrieval_step(tree, ex, train=False)[1] for ex in probe
                )
            row["inference_ms"] = 1000.0 * (time.perf_counter() - t0) / len(probe)
        rows.append(row)

    _emit_table(rows, config.metrics)
    return rows


def cmd_bench(config: RunConfig, sizes: list[int]) -> list[dict]:
    """Synthetic store scaling: build n memories, time inserts and queries."""
    from .synth import random_keys

    rows: list[dict] = []
    for n in sizes:
        keys = random_keys(n, seed=config.seed, bits=config.hash_bits)
        probes = random_keys(min(1000, n), seed=config.seed + 1, bits=config.hash_bits)
        tree = config.build_tree()
        t0 = time.perf_counter()
        for i, x in enumerate(keys):
            tree.insert(Memory(x, i))
        insert_s = time.perf_counter() - t0
        t0 = time.perf_counter()
        for x in probes:
            tree.query(x, 1, 0.0)
        query_s = time.perf_counter() - t0

        prog_err = tree.max_progressive_error()
        try:
            k_bound = balance_bound(prog_err, tree.alpha, n)
        except ValueError:
            k_bound = math.inf
        rows.append(
            {
                "n": n,
                "insert_ms": 1000.0 * insert_s / n,
                "query_ms": 1000.0 * query_s / len(probes),
                "max_depth": tree.max_depth(),
                "max_leaf": max(len(leaf.mem) for leaf in tree.leaves()),
                "progressive_error": prog_err,
                "K_bound": k_bound,
            }
        )
    _emit_table(rows, config.metrics)
    return rows


def _emit_table(rows: list[dict], path: Optional[str]) -> None:
    if not rows:
        return
    columns = list(rows[0].keys())
    lines = ["\t".join(columns)]
    for row in rows:
        lines.append("\t".join(_fmt(row.get(c, "")) for c in columns))
    text = "\n".join(lines) + "\n"
    if path:
        Path(path).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)
