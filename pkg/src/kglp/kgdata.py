"""Loading, interning, validation, and indexing of knowledge-graph datasets.

Dataset directory layout (tab-separated, UTF-8, no header):

    train.txt / valid.txt / test.txt   head <TAB> relation <TAB> tail
    labels.tsv                         entity <TAB> label text      (optional)
    type_links.tsv                     entity <TAB> type            (optional)
    onto.txt                           type <TAB> meta-rel <TAB> type (optional)

An inductive dataset comes as a pair of directories (`<name>` and
`<name>_ind`): training splits live in the first, the inference graph and
the inductive test split in the second.
"""

from __future__ import annotations

import json
import random
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DataError


@dataclass(frozen=True)
class Triple:
    """A directed, relation-typed edge. Self-loops are allowed."""

    head: int
    rel: int
    tail: int

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.head, self.rel, self.tail)


class Vocab:
    """String <-> integer interning tables, extended in first-seen order."""

    def __init__(self) -> None:
        self.entity_ids: dict[str, int] = {}
        self.entity_names: list[str] = []
        self.relation_ids: dict[str, int] = {}
        self.relation_names: list[str] = []
        self.type_ids: dict[str, int] = {}
        self.type_names: list[str] = []
        self.meta_rel_ids: dict[str, int] = {}
        self.meta_rel_names: list[str] = []

    def entity(self, name: str) -> int:
        eid = self.entity_ids.get(name)
        if eid is None:
            eid = len(self.entity_names)
            self.entity_ids[name] = eid
            self.entity_names.append(name)
        return eid

    def relation(self, name: str) -> int:
        rid = self.relation_ids.get(name)
        if rid is None:
            rid = len(self.relation_names)
            self.relation_ids[name] = rid
            self.relation_names.append(name)
        return rid

    def type_(self, name: str) -> int:
        tid = self.type_ids.get(name)
        if tid is None:
            tid = len(self.type_names)
            self.type_ids[name] = tid
            self.type_names.append(name)
        return tid

    def meta_rel(self, name: str) -> int:
        mid = self.meta_rel_ids.get(name)
        if mid is None:
            mid = len(self.meta_rel_names)
            self.meta_rel_ids[name] = mid
            self.meta_rel_names.append(name)
        return mid


class KnowledgeGraph:
    """Relation-typed directed multigraph with bidirectional adjacency.

    `out_adj[h]` holds `(rel, tail)` pairs and `in_adj[t]` holds
    `(rel, head)` pairs; the two views are exact inverses of the triple
    list. Immutable once built.
    """

    def __init__(self, triples: list[Triple]) -> None:
        self.triples = triples
        self.out_adj: dict[int, list[tuple[int, int]]] = defaultdict(list)
        self.in_adj: dict[int, list[tuple[int, int]]] = defaultdict(list)
        self.entities: set[int] = set()
        self.relations: set[int] = set()
        self.triple_set: set[tuple[int, int, int]] = set()
        for t in triples:
            self.out_adj[t.head].append((t.rel, t.tail))
            self.in_adj[t.tail].append((t.rel, t.head))
            self.entities.add(t.head)
            self.entities.add(t.tail)
            self.relations.add(t.rel)
            self.triple_set.add(t.as_tuple())

    @property
    def entity_count(self) -> int:
        return len(self.entities)

    @property
    def relation_count(self) -> int:
        return len(self.relations)

    def __len__(self) -> int:
        return len(self.triples)

    def __contains__(self, triple: tuple[int, int, int]) -> bool:
        return triple in self.triple_set

    def undirected_neighbors(self, node: int):
        """All (rel, neighbor, is_inverse) edges touching `node`."""
        for rel, nbr in self.out_adj.get(node, ()):
            yield rel, nbr, False
        for rel, nbr in self.in_adj.get(node, ()):
            yield rel, nbr, True


def load_split(directory: str | Path, split: str, vocab: Vocab | None = None) -> KnowledgeGraph:
    """Read `<split>.txt` from `directory` into a graph, extending `vocab`.

    Line order is preserved in the triple list; the vocabulary is only ever
    extended, never rewritten.
    """
    vocab = vocab if vocab is not None else Vocab()
    path = Path(directory) / f"{split}.txt"
    if not path.is_file():
        raise DataError(f"split file not found: {path}")
    triples: list[Triple] = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            h, r, t = parts
            triples.append(Triple(vocab.entity(h), vocab.relation(r), vocab.entity(t)))
    return KnowledgeGraph(triples)


def save_split(graph: KnowledgeGraph, vocab: Vocab, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in graph.triples:
            f.write(f"{vocab.entity_names[t.head]}\t{vocab.relation_names[t.rel]}\t{vocab.entity_names[t.tail]}\n")


def density(graph: KnowledgeGraph) -> float:
    """Graph density 2|T|/|E|."""
    if graph.entity_count == 0:
        raise DataError("density undefined for a graph with no entities")
    return 2.0 * len(graph.triples) / graph.entity_count


@dataclass
class InductiveReport:
    entity_overlap: list[int]
    unknown_relations: list[int]

    @property
    def valid(self) -> bool:
        return not self.entity_overlap and not self.unknown_relations

    def to_json_dict(self, vocab: Vocab | None = None) -> dict:
        if vocab is None:
            return {"entity_overlap": self.entity_overlap, "unknown_relations": self.unknown_relations}
        return {
            "entity_overlap": [vocab.entity_names[e] for e in self.entity_overlap],
            "unknown_relations": [vocab.relation_names[r] for r in self.unknown_relations],
        }


def validate_inductive(train: KnowledgeGraph, test: KnowledgeGraph) -> InductiveReport:
    """List test entities overlapping train, and test relations absent from train.

    An empty report means the split is a valid inductive split. Violations
    are data, not errors.
    """
    overlap = sorted(train.entities & test.entities)
    unknown = sorted(test.relations - train.relations)
    return InductiveReport(entity_overlap=overlap, unknown_relations=unknown)


def split_ontology(
    triples: list[tuple[int, int, int]],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> tuple[list, list, list]:
    """Shuffle and partition ontology triples into train/valid/test.

    Sizes are floor-based with the remainder assigned to train, so the
    partition is exact. Deterministic for a given seed.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios must sum to 1, got {ratios}")
    order = list(triples)
    random.Random(seed).shuffle(order)
    n = len(order)
    n_valid = int(n * ratios[1])
    n_test = int(n * ratios[2])
    n_train = n - n_valid - n_test
    return order[:n_train], order[n_train : n_train + n_valid], order[n_train + n_valid :]


GROUP_ZERO = "zero"
GROUP_ONE = "one"
GROUP_MULTI_FIRST = "multi_first"
GROUP_MULTI_SECOND = "multi_second"


@dataclass
class TypeAnnotationIndex:
    """Entity grouping by explicit-type count: 0 / 1 / >1 split at the median.

    Entities at the median go to the first half; entities absent from the
    underlying type links are group zero.
    """

    counts: dict[int, int]
    median: float | None
    groups: dict[int, str] = field(default_factory=dict)

    def group(self, entity: int) -> str:
        return self.groups.get(entity, GROUP_ZERO)


def build_type_index(type_links: dict[int, set[int]]) -> TypeAnnotationIndex:
    counts = {e: len(ts) for e, ts in type_links.items()}
    multi = sorted(c for c in counts.values() if c > 1)
    median: float | None = None
    if multi:
        mid = len(multi) // 2
        if len(multi) % 2 == 1:
            median = float(multi[mid])
        else:
            median = (multi[mid - 1] + multi[mid]) / 2.0
    groups: dict[int, str] = {}
    for e, c in counts.items():
        if c == 0:
            groups[e] = GROUP_ZERO
        elif c == 1:
            groups[e] = GROUP_ONE
        elif c <= median:
            groups[e] = GROUP_MULTI_FIRST
        else:
            groups[e] = GROUP_MULTI_SECOND
    return TypeAnnotationIndex(counts=counts, median=median, groups=groups)


@dataclass
class DatasetBundle:
    """Everything one experiment consumes: splits, labels, types, ontology."""

    train: KnowledgeGraph
    valid: KnowledgeGraph
    test: KnowledgeGraph
    inference: KnowledgeGraph
    labels: dict[int, str]
    missing_labels: list[int]
    type_links: dict[int, set[int]]
    ontology: list[tuple[int, int, int]]
    vocab: Vocab

    def label(self, entity: int) -> str:
        """Entity label text, falling back to the raw identifier string."""
        return self.labels.get(entity, self.vocab.entity_names[entity])


def _load_labels(directory: Path, vocab: Vocab) -> dict[int, str]:
    path = directory / "labels.tsv"
    labels: dict[int, str] = {}
    if not path.is_file():
        return labels
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected 2 tab-separated fields")
            name, text = parts
            if name not in vocab.entity_ids:
                raise DataError(f"{path}:{lineno}: label for unknown entity {name!r}")
            labels[vocab.entity_ids[name]] = text
    return labels


def _load_type_links(directory: Path, vocab: Vocab) -> dict[int, set[int]]:
    path = directory / "type_links.tsv"
    links: dict[int, set[int]] = {}
    if not path.is_file():
        return links
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected 2 tab-separated fields")
            name, tname = parts
            eid = vocab.entity(name)
            links.setdefault(eid, set()).add(vocab.type_(tname))
    return links


def _load_ontology(directory: Path, vocab: Vocab) -> list[tuple[int, int, int]]:
    path = directory / "onto.txt"
    onto: list[tuple[int, int, int]] = []
    if not path.is_file():
        return onto
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields")
            a, m, b = parts
            onto.append((vocab.type_(a), vocab.meta_rel(m), vocab.type_(b)))
    return onto


def load_bundle(
    data_dir: str | Path,
    inference_dir: str | Path | None = None,
) -> DatasetBundle:
    """Load a dataset directory (and optionally its inductive counterpart).

    With `inference_dir`, the bundle's test split and inference graph come
    from that directory (its `test.txt` and `train.txt` respectively);
    without it, the inference graph is the test graph itself, which is the
    leave-one-out configuration.

    Vocabulary interning is first-seen order over train, valid, test, then
    the inference-side splits, so ids are reproducible across runs.
    """
    data_dir = Path(data_dir)
    vocab = Vocab()
    train = load_split(data_dir, "train", vocab)
    valid = load_split(data_dir, "valid", vocab)
    own_test = load_split(data_dir, "test", vocab)
    if inference_dir is not None:
        inference_dir = Path(inference_dir)
        inference = load_split(inference_dir, "train", vocab)
        test = load_split(inference_dir, "test", vocab)
        labels = _load_labels(data_dir, vocab) | _load_labels(inference_dir, vocab)
        type_links = _load_type_links(data_dir, vocab)
        for e, ts in _load_type_links(inference_dir, vocab).items():
            type_links.setdefault(e, set()).update(ts)
        ontology = _load_ontology(data_dir, vocab) or _load_ontology(inference_dir, vocab)
    else:
        test = own_test
        inference = own_test
        labels = _load_labels(data_dir, vocab)
        type_links = _load_type_links(data_dir, vocab)
        ontology = _load_ontology(data_dir, vocab)
    missing = sorted(
        e for g in (train, valid, test, inference) for e in g.entities if e not in labels
    )
    missing = sorted(set(missing))
    return DatasetBundle(
        train=train,
        valid=valid,
        test=test,
        inference=inference,
        labels=labels,
        missing_labels=missing,
        type_links=type_links,
        ontology=ontology,
        vocab=vocab,
    )


def stats_dict(graph: KnowledgeGraph) -> dict:
    d = {
        "entities": graph.entity_count,
        "relations": graph.relation_count,
        "triples": len(graph.triples),
    }
    d["density"] = density(graph) if graph.entity_count else None
    return d


def report_json(report: InductiveReport, vocab: Vocab, missing_labels: list[int]) -> str:
    payload = report.to_json_dict(vocab)
    payload["missing_labels"] = [vocab.entity_names[e] for e in missing_labels]
    return json.dumps(payload, indent=2)
