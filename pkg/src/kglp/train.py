"""Negative sampling, margin loss, Adam, and the training loop.

Defaults: lr 1e-3, 50 epochs, batch 16, margin 10, 3 hops, semantic
dimension 24 (layer-0 width 32), one filtered negative per positive, early
stopping on validation MRR with a patience of 100 training batches and a
validation pass every 50 batches.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError
from .gnn import (
    Example,
    ModelHyper,
    ModelParams,
    init_model,
    make_example,
    pair_loss_and_gradients,
)
from .kgdata import DatasetBundle, KnowledgeGraph, Triple
from .semantic import AGG_SUM, AGGREGATIONS, EmbeddingStore
from .subgraph import extract_enclosing

VALIDATE_EVERY = 50  # batches between validation passes


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 50
    patience: int = 100          # training batches without validation improvement
    batch: int = 16
    margin: float = 10.0
    hops: int = 3
    sem_dim: int = 24
    layers: int = 3
    hidden: int = 32
    bases: int = 4
    d_p: int = 64
    seed: int = 0
    negatives: int = 1
    aggregation: str = AGG_SUM
    semantic_enabled: bool = True
    threads: int = 1
    eval_negatives: int = 50
    eval_runs: int = 1           # validation runs during training

    def __post_init__(self) -> None:
        # lr = 0 is allowed as an explicit no-op optimizer setting.
        if self.lr < 0:
            raise DataError("config field lr must be non-negative")
        for name in ("epochs", "patience", "batch", "margin", "hops", "sem_dim", "negatives"):
            if getattr(self, name) <= 0:
                raise DataError(f"config field {name} must be positive")
        if self.aggregation not in AGGREGATIONS:
            raise DataError(f"unknown aggregation {self.aggregation!r}")

    @property
    def layer0_dim(self) -> int:
        # Positional width 2k+2 plus the semantic width; not independently
        # configurable.
        return 2 * self.hops + 2 + self.sem_dim


_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def parse_config_file(path: str | Path) -> dict:
    """Flat `key = value` config file; unknown keys are rejected."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"config file not found: {path}")
    fields = {f.name: f.type for f in TrainConfig.__dataclass_fields__.values()}
    out: dict = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected `key = value`")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in fields:
            raise DataError(f"{path}:{lineno}: unknown config key {key!r}")
        kind = TrainConfig.__dataclass_fields__[key].type
        if kind == "bool":
            if value.lower() not in _BOOL:
                raise DataError(f"{path}:{lineno}: bad boolean {value!r}")
            out[key] = _BOOL[value.lower()]
        elif kind == "int":
            out[key] = int(value)
        elif kind == "float":
            out[key] = float(value)
        else:
            out[key] = value
    return out


def sample_negative(
    graph: KnowledgeGraph,
    triple: Triple,
    rng: np.random.Generator,
    exclude_self: bool = False,
    max_tries: int | None = None,
) -> Triple:
    """Corrupt the head or tail (fair coin) uniformly over graph entities.

    Corruptions equal to the positive or present in the graph are rejected
    and redrawn (filtered sampling); exhaustion raises after
    100 * entity_count failed draws.
    """
    entities = sorted(graph.entities)
    if len(entities) < 2:
        raise DataError("need at least two entities to sample corruptions")
    tries = max_tries if max_tries is not None else 100 * len(entities)
    for _ in range(tries):
        corrupt_head = rng.random() < 0.5
        repl = entities[int(rng.integers(len(entities)))]
        cand = Triple(repl, triple.rel, triple.tail) if corrupt_head else Triple(triple.head, triple.rel, repl)
        if cand == triple or cand.as_tuple() in graph.triple_set:
            continue
        if exclude_self and cand.head == cand.tail:
            continue
        return cand
    raise DataError(f"negative sampling exhausted after {tries} draws for {triple}")


def margin_loss(pos_scores, neg_scores, gamma: float) -> float:
    """Pairwise hinge: sum_i max(0, f(neg_i) - f(pos_i) + gamma)."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if pos.shape != neg.shape:
        raise DataError(f"score lists differ in length: {pos.shape} vs {neg.shape}")
    return float(np.maximum(0.0, neg - pos + gamma).sum())


class AdamState:
    """Per-tensor first/second moment estimates with bias correction."""

    def __init__(self, tensors: dict[str, np.ndarray],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.m = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in tensor {name}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, param in tensors.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            param -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(state: AdamState, tensors: dict[str, np.ndarray],
              grads: dict[str, np.ndarray], lr: float) -> None:
    state.step(tensors, grads, lr)


class ExtractionCache:
    """Per-run memo of (triple -> training example); extraction is pure, so
    cached entries are reused across epochs."""

    def __init__(self, graph: KnowledgeGraph, entity_names: list[str],
                 hops: int, num_relations: int) -> None:
        self.graph = graph
        self.entity_names = entity_names
        self.hops = hops
        self.num_relations = num_relations
        self._memo: dict[tuple[int, int, int], Example] = {}

    def example(self, triple: Triple) -> Example:
        key = triple.as_tuple()
        ex = self._memo.get(key)
        if ex is None:
            sg = extract_enclosing(self.graph, triple.head, triple.rel, triple.tail, self.hops)
            ex = make_example(sg, self.entity_names, self.num_relations)
            self._memo[key] = ex
        return ex


@dataclass
class TrainLogRecord:
    batch: int
    train_loss: float
    val_mrr: float
    best: bool

    def to_json(self) -> str:
        return json.dumps({"batch": self.batch, "train_loss": self.train_loss,
                           "val_mrr": self.val_mrr, "best": self.best})


def fit(
    bundle: DatasetBundle,
    config: TrainConfig,
    store: EmbeddingStore | None = None,
    log_path: str | Path | None = None,
) -> tuple[ModelParams, list[TrainLogRecord]]:
    """Train on the bundle's train graph; returns the best-validation model.

    Validation ranks the valid split against `eval_negatives` corruptions on
    the train graph under strict tie-breaking, every VALIDATE_EVERY batches.
    With an empty validation split early stopping is disabled (warning via
    the log) and the final parameters are returned.
    """
    from .evaluation import rank_triples  # local import to avoid a cycle

    if not bundle.train.triples:
        raise DataError("empty training graph")
    if config.semantic_enabled and store is None:
        raise DataError("semantic training requires an embedding store")

    hyper = ModelHyper(
        num_relations=len(bundle.vocab.relation_names),
        k=config.hops, L=config.layers, B=config.bases, hidden=config.hidden,
        sem_dim=config.sem_dim, d_p=config.d_p,
        dim_raw=store.dim if store is not None else 0,
        n_prompts=store.num_prompts if store is not None else 0,
        aggregation=config.aggregation,
        semantic_enabled=config.semantic_enabled,
        seed=config.seed,
    )
    rng = np.random.Generator(np.random.PCG64(config.seed))
    model = init_model(hyper, rng)
    adam = AdamState(model.tensors())
    cache = ExtractionCache(bundle.train, bundle.vocab.entity_names, config.hops, hyper.num_relations)

    positives = list(bundle.train.triples)
    has_validation = bool(bundle.valid.triples)
    if not has_validation:
        warnings.warn("empty validation split: early stopping disabled", stacklevel=2)
    best_mrr = -1.0
    best_model = model.copy()
    best_batch = 0
    records: list[TrainLogRecord] = []
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None

    def validate() -> float:
        records, _ = rank_triples(
            model, store, bundle.train, bundle.valid.triples,
            bundle.vocab.entity_names, config.hops,
            n_negatives=config.eval_negatives, seed=config.seed, run_index=0,
            threads=config.threads,
        )
        return float(np.mean([1.0 / r.rank for r in records])) if records else 0.0

    batch_count = 0
    last_validated = -1
    window_losses: list[float] = []

    def run_validation() -> None:
        nonlocal best_mrr, best_model, best_batch, window_losses, last_validated
        mrr = validate()
        improved = mrr > best_mrr
        if mrr >= best_mrr:
            # Ties refresh the stored checkpoint (keep the most-trained model
            # among equal-MRR states); patience counts strict improvements.
            best_model = model.copy()
        if improved:
            best_mrr = mrr
            best_batch = batch_count
        rec = TrainLogRecord(
            batch=batch_count,
            train_loss=float(np.mean(window_losses)) if window_losses else 0.0,
            val_mrr=mrr,
            best=improved,
        )
        records.append(rec)
        if log_file:
            log_file.write(rec.to_json() + "\n")
        window_losses = []
        last_validated = batch_count

    stop = False
    for _epoch in range(config.epochs):
        order = rng.permutation(len(positives))
        for start in range(0, len(order), config.batch):
            idx = order[start:start + config.batch]
            pairs = []
            for i in idx:
                pos = positives[int(i)]
                for _ in range(config.negatives):
                    neg = sample_negative(bundle.train, pos, rng)
                    pairs.append((cache.example(pos), cache.example(neg)))
            loss, grads = pair_loss_and_gradients(model, store, pairs, config.margin)
            adam.step(model.tensors(), grads, config.lr)
            batch_count += 1
            window_losses.append(loss / len(pairs))

            if has_validation and batch_count % VALIDATE_EVERY == 0:
                run_validation()
                if batch_count - best_batch >= config.patience:
                    stop = True
                    break
        if stop:
            break

    # Short runs may never hit a periodic validation; measure the final state
    # so "best checkpoint" always reflects at least one observation.
    if has_validation and last_validated != batch_count:
        run_validation()

    if log_file:
        log_file.close()
    if has_validation:
        return best_model, records
    return model, records
