import numpy as np
import pytest

from kglp.kgdata import KnowledgeGraph, Triple, Vocab


def triples_of(pairs):
    return [Triple(h, r, t) for h, r, t in pairs]


def graph_of(pairs) -> KnowledgeGraph:
    return KnowledgeGraph(triples_of(pairs))


def random_graph(rng: np.random.Generator, n_nodes: int, n_edges: int, n_rels: int) -> KnowledgeGraph:
    """Random multigraph; every node id < n_nodes appears (isolated allowed)."""
    triples = []
    for _ in range(n_edges):
        h = int(rng.integers(n_nodes))
        t = int(rng.integers(n_nodes))
        r = int(rng.integers(n_rels))
        triples.append(Triple(h, r, t))
    return KnowledgeGraph(triples)


def write_split(directory, name, rows):
    with open(directory / f"{name}.txt", "w", encoding="utf-8") as f:
        for h, r, t in rows:
            f.write(f"{h}\t{r}\t{t}\n")


@pytest.fixture
def tiny_vocab():
    return Vocab()
