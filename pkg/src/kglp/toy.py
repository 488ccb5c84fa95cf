"""Synthetic rule-governed knowledge graphs for tests and demos.

Entities carry one of two latent types (alpha/beta). Relation r1 maps each
alpha to a distinct beta and each beta to a distinct alpha (two random
bijections), and r2 is the composition: r2(X, Z) holds exactly when
r1(X, Y) and r1(Y, Z) hold. Because the maps are bijections, every ranking
task has a unique structurally valid answer, so a model that learns the
composition rule can reach rank 1 on held-out r2 triples.

The inductive test side repeats the construction over fresh entities; its
r1 edges plus half of its r2 edges form the inference graph, the other
half is the test split. The companion embedding store has no materialized
vectors: it serves deterministic hash vectors keyed to the latent type, so
same-type entities share raw semantics.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kgdata import DatasetBundle, KnowledgeGraph, Triple, Vocab, save_split
from .semantic import DEFAULT_PROMPT_STRINGS, EmbeddingStore, StoreManifest

R1 = "r1"
R2 = "r2"


def _bijections_without_fixed_points(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Two maps pi (alpha->beta) and rho (beta->alpha) whose compositions
    rho∘pi and pi∘rho have no fixed points, so r2 never produces self-loops."""
    while True:
        pi = rng.permutation(n)
        rho = rng.permutation(n)
        if np.all(rho[pi] != np.arange(n)) and np.all(pi[rho] != np.arange(n)):
            return pi, rho


def _block(prefix: str, rng: np.random.Generator, n_alpha: int, n_beta: int):
    """Entity names, r1 edges, and implied r2 edges for one entity block."""
    assert n_alpha == n_beta, "bijection construction needs equal type counts"
    alphas = [f"{prefix}a{i:02d}" for i in range(n_alpha)]
    betas = [f"{prefix}b{i:02d}" for i in range(n_beta)]
    pi, rho = _bijections_without_fixed_points(rng, n_alpha)
    r1_edges = [(alphas[i], betas[pi[i]]) for i in range(n_alpha)]
    r1_edges += [(betas[j], alphas[rho[j]]) for j in range(n_beta)]
    r2_edges = [(alphas[i], alphas[rho[pi[i]]]) for i in range(n_alpha)]
    r2_edges += [(betas[j], betas[pi[rho[j]]]) for j in range(n_beta)]
    types = {name: "alpha" for name in alphas} | {name: "beta" for name in betas}
    return types, r1_edges, r2_edges


def _blocks(prefix: str, rng: np.random.Generator, n_entities: int, block_size: int):
    """Disjoint bijection blocks; keeps 3-hop neighborhoods small so the
    composition rule stays legible inside every enclosing subgraph."""
    assert n_entities % block_size == 0 and block_size % 2 == 0
    types: dict[str, str] = {}
    r1_edges: list[tuple[str, str]] = []
    r2_edges: list[tuple[str, str]] = []
    for b in range(n_entities // block_size):
        t, e1, e2 = _block(f"{prefix}{b}", rng, block_size // 2, block_size // 2)
        types |= t
        r1_edges += e1
        r2_edges += e2
    return types, r1_edges, r2_edges


@dataclass
class ToyData:
    bundle: DatasetBundle
    latent_type: dict[str, str]
    store: EmbeddingStore
    train_eval: list[Triple]  # train-graph triples used for train-split ranking


def rule_bundle(
    seed: int = 0,
    n_train: int = 30,
    n_test: int = 18,
    valid_fraction: float = 0.2,
    known_fraction: float = 0.8,
    block_size: int = 6,
    test_block_size: int = 6,
    dim_raw: int = 16,
) -> ToyData:
    """Build the two-type composition-rule dataset with `n_train` training
    entities and `n_test` unseen inference-side entities."""
    rng = np.random.Generator(np.random.PCG64(seed))
    train_types, train_r1, train_r2 = _blocks("t", rng, n_train, block_size)
    test_types, test_r1, test_r2 = _blocks("x", rng, n_test, test_block_size)

    vocab = Vocab()
    r1 = vocab.relation(R1)
    r2 = vocab.relation(R2)

    def interned(pairs, rel):
        return [Triple(vocab.entity(h), rel, vocab.entity(t)) for h, t in pairs]

    for name in train_types:
        vocab.entity(name)

    n_valid = max(1, int(round(valid_fraction * len(train_r2))))
    order = rng.permutation(len(train_r2))
    valid_pairs = [train_r2[i] for i in order[:n_valid]]
    train_pairs = [train_r2[i] for i in order[n_valid:]]
    train_triples = interned(train_r1, r1) + interned(train_pairs, r2)
    valid_triples = interned(valid_pairs, r2)

    for name in test_types:
        vocab.entity(name)
    n_known = int(round(known_fraction * len(test_r2)))
    order = rng.permutation(len(test_r2))
    known_pairs = [test_r2[i] for i in order[:n_known]]
    held_pairs = [test_r2[i] for i in order[n_known:]]
    inference_triples = interned(test_r1, r1) + interned(known_pairs, r2)
    test_triples = interned(held_pairs, r2)

    bundle = DatasetBundle(
        train=KnowledgeGraph(train_triples),
        valid=KnowledgeGraph(valid_triples),
        test=KnowledgeGraph(test_triples),
        inference=KnowledgeGraph(inference_triples),
        labels={},
        missing_labels=[],
        type_links={},
        ontology=[],
        vocab=vocab,
    )
    manifest = StoreManifest(model="toy-hash", mode="mlm", prompts=list(DEFAULT_PROMPT_STRINGS), dim=dim_raw)
    store = EmbeddingStore(
        manifest,
        fallback="hash",
        fallback_seed=seed,
        fallback_keys=dict(train_types | test_types),
    )
    return ToyData(
        bundle=bundle,
        latent_type=train_types | test_types,
        store=store,
        train_eval=list(train_triples),
    )


def demo_graph(seed: int = 0) -> tuple[KnowledgeGraph, Vocab]:
    """Small fixed graph backing the extraction demo when no dataset is given."""
    toy = rule_bundle(seed=seed, n_train=12, n_test=4, block_size=12, test_block_size=4)
    return toy.bundle.train, toy.bundle.vocab


def write_dataset(toy: ToyData, main_dir: str | Path, ind_dir: str | Path) -> None:
    """Materialize the toy bundle as a paired dataset directory layout."""
    main_dir, ind_dir = Path(main_dir), Path(ind_dir)
    main_dir.mkdir(parents=True, exist_ok=True)
    ind_dir.mkdir(parents=True, exist_ok=True)
    vocab = toy.bundle.vocab
    save_split(toy.bundle.train, vocab, main_dir / "train.txt")
    save_split(toy.bundle.valid, vocab, main_dir / "valid.txt")
    (main_dir / "test.txt").write_text("", encoding="utf-8")
    save_split(toy.bundle.inference, vocab, ind_dir / "train.txt")
    (ind_dir / "valid.txt").write_text("", encoding="utf-8")
    save_split(toy.bundle.test, vocab, ind_dir / "test.txt")
