"""Scorer tests: hand-computed layer oracle, finite-difference gradient
checks of the full joint model, invariances, and checkpoint round-trips."""

import numpy as np
import pytest

from kglp.errors import DataError
from kglp.gnn import (
    Example,
    LayerParams,
    ModelHyper,
    ModelParams,
    SubgraphTensors,
    attention_weight,
    example_forward,
    init_model,
    layer_forward,
    load_checkpoint,
    make_example,
    pair_loss,
    pair_loss_and_gradients,
    save_checkpoint,
    score,
    score_forward,
    score_backward,
)
from kglp.kgdata import Triple
from kglp.semantic import DEFAULT_PROMPT_STRINGS, EmbeddingStore, StoreManifest
from kglp.subgraph import EnclosingSubgraph


def tiny_hyper(**kw) -> ModelHyper:
    base = dict(num_relations=2, k=1, L=2, B=2, hidden=4, sem_dim=0,
                semantic_enabled=False, seed=0)
    base.update(kw)
    return ModelHyper(**base)


def random_subgraph(rng, n_nodes, n_edges, n_rels, k=1, r_t=0) -> EnclosingSubgraph:
    edges = sorted(
        (int(rng.integers(n_nodes)), int(rng.integers(n_rels)), int(rng.integers(n_nodes)))
        for _ in range(n_edges)
    )
    return EnclosingSubgraph(
        target=Triple(0, r_t, 1 if n_nodes > 1 else 0),
        nodes=list(range(n_nodes)),
        dist_u=np.zeros(n_nodes, dtype=np.int64),
        dist_v=np.zeros(n_nodes, dtype=np.int64),
        edges=edges,
        k=k,
    )


def random_example(rng, model: ModelParams, n_nodes=5, n_edges=6, r_t=0) -> Example:
    sg = random_subgraph(rng, n_nodes, n_edges, model.hyper.num_relations, model.hyper.k, r_t)
    st = SubgraphTensors.from_subgraph(sg, model.hyper.num_relations)
    return Example(
        sg=sg,
        st=st,
        h_pos=rng.standard_normal((n_nodes, model.hyper.pos_dim)),
        entities=[f"n{i}" for i in range(n_nodes)],
        r_t=r_t,
    )


def hash_store(dim, prompts=2, seed=0) -> EmbeddingStore:
    manifest = StoreManifest(model="t", mode="mlm", prompts=list(DEFAULT_PROMPT_STRINGS[:prompts]), dim=dim)
    return EmbeddingStore(manifest, fallback="hash", fallback_seed=seed)


def fd_max_relative_error(model, store, pairs, gamma, eps=1e-4, floor=1e-4):
    """Central finite differences of the pair loss over every parameter."""
    _, grads = pair_loss_and_gradients(model, store, pairs, gamma)
    worst = 0.0
    for name, arr in model.tensors().items():
        flat = arr.reshape(-1)
        gflat = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = pair_loss(model, store, pairs, gamma)
            flat[i] = orig - eps
            down = pair_loss(model, store, pairs, gamma)
            flat[i] = orig
            fd = (up - down) / (2.0 * eps)
            rel = abs(gflat[i] - fd) / max(abs(gflat[i]), abs(fd), floor)
            worst = max(worst, rel)
    return worst


class TestAttentionWeight:
    def test_zero_head_gives_half(self):
        rng = np.random.default_rng(0)
        model = init_model(tiny_hyper(), rng)
        layer = model.layers[0]
        layer.w_alpha[...] = 0.0
        layer.b_alpha[...] = 0.0
        h = rng.standard_normal(4)
        assert attention_weight(layer, h, h, h, h) == pytest.approx(0.5)

    def test_monotone_in_bias(self):
        rng = np.random.default_rng(1)
        model = init_model(tiny_hyper(), rng)
        layer = model.layers[0]
        h = rng.standard_normal(4)
        values = []
        for b in (-5.0, 0.0, 5.0, 50.0):
            layer.b_alpha[...] = b
            values.append(attention_weight(layer, h, h, h, h))
        assert values == sorted(values)
        assert values[-1] > 1.0 - 1e-12

    def test_open_interval(self):
        rng = np.random.default_rng(2)
        model = init_model(tiny_hyper(), rng)
        layer = model.layers[0]
        for _ in range(50):
            args = [rng.standard_normal(4) for _ in range(4)]
            a = attention_weight(layer, *args)
            assert 0.0 < a < 1.0


class TestLayerForward:
    def test_zero_edges_is_self_loop_only(self):
        rng = np.random.default_rng(3)
        model = init_model(tiny_hyper(), rng)
        sg = random_subgraph(rng, 4, 0, 2)
        st = SubgraphTensors.from_subgraph(sg, 2)
        H = rng.standard_normal((4, 4))
        tr = layer_forward(model.layers[0], st, H, model.rel_emb, 0)
        assert np.array_equal(tr.H_out, np.maximum(H @ model.layers[0].W0.T, 0.0))

    def test_large_negative_gate_approaches_zero_edges(self):
        rng = np.random.default_rng(4)
        model = init_model(tiny_hyper(), rng)
        sg = random_subgraph(rng, 3, 1, 2)
        st = SubgraphTensors.from_subgraph(sg, 2)
        H = rng.standard_normal((3, 4))
        model.layers[0].b_alpha[...] = -50.0
        gated = layer_forward(model.layers[0], st, H, model.rel_emb, 0).H_out
        no_edges = np.maximum(H @ model.layers[0].W0.T, 0.0)
        assert np.allclose(gated, no_edges, atol=1e-6)

    def test_three_node_hand_oracle(self):
        # Explicit per-edge recomputation with python loops.
        hyper = tiny_hyper(L=1, hidden=2, B=2, num_relations=2, k=1)
        rng = np.random.default_rng(5)
        model = init_model(hyper, rng)
        layer = model.layers[0]
        sg = EnclosingSubgraph(
            target=Triple(0, 1, 1), nodes=[0, 1, 2],
            dist_u=np.zeros(3, dtype=np.int64), dist_v=np.zeros(3, dtype=np.int64),
            edges=[(0, 0, 2), (2, 1, 1)], k=1,
        )
        st = SubgraphTensors.from_subgraph(sg, 2)
        H = rng.standard_normal((3, 4))
        E = model.rel_emb
        r_t = 1
        got = layer_forward(layer, st, H, E, r_t)

        def sig(x):
            return 1.0 / (1.0 + np.exp(-x))

        Wr = [layer.coeff[r] @ layer.V.reshape(2, -1) for r in range(4)]
        Wr = [w.reshape(2, 4) for w in Wr]
        agg = np.zeros((3, 2))
        # doubled message edges: (src, rel, dst)
        msg_edges = [(2, 0, 0), (0, 2, 2), (1, 1, 2), (2, 3, 1)]
        for j, r, i in msg_edges:
            s_in = np.concatenate([H[j], H[i], E[r], E[r_t]])
            s = np.maximum(layer.W_s @ s_in + layer.b_s, 0.0)
            alpha = sig(layer.w_alpha @ s + layer.b_alpha[0])
            agg[i] += alpha * (Wr[r] @ (H[j] - E[r]))
        expect = np.maximum(H @ layer.W0.T + agg, 0.0)
        assert np.allclose(got.H_out, expect, atol=1e-10)
        assert np.allclose(got.E_out, E @ layer.W_rel.T, atol=1e-12)

    def test_out_of_range_edge_rejected(self):
        sg = EnclosingSubgraph(
            target=Triple(0, 0, 1), nodes=[0, 1],
            dist_u=np.zeros(2, dtype=np.int64), dist_v=np.zeros(2, dtype=np.int64),
            edges=[(0, 0, 5)], k=1,
        )
        with pytest.raises(DataError):
            SubgraphTensors.from_subgraph(sg, 2)


class TestScore:
    def test_zero_head_scores_zero(self):
        rng = np.random.default_rng(6)
        model = init_model(tiny_hyper(), rng)
        model.W_f[...] = 0.0
        ex = random_example(rng, model)
        assert example_forward(model, None, ex).score == 0.0

    def test_pure_function(self):
        rng = np.random.default_rng(7)
        model = init_model(tiny_hyper(), rng)
        ex = random_example(rng, model)
        a = example_forward(model, None, ex).score
        b = example_forward(model, None, ex).score
        assert a == b

    def test_node_order_permutation_invariance(self):
        rng = np.random.default_rng(8)
        model = init_model(tiny_hyper(), rng)
        n = 6
        ex = random_example(rng, model, n_nodes=n, n_edges=10)
        base = example_forward(model, None, ex).score

        perm = np.concatenate([[0, 1], 2 + rng.permutation(n - 2)])
        inv = np.argsort(perm)
        sg2 = EnclosingSubgraph(
            target=ex.sg.target,
            nodes=[ex.sg.nodes[p] for p in perm],
            dist_u=ex.sg.dist_u[perm],
            dist_v=ex.sg.dist_v[perm],
            edges=sorted((int(inv[h]), r, int(inv[t])) for h, r, t in ex.sg.edges),
            k=ex.sg.k,
        )
        ex2 = Example(
            sg=sg2,
            st=SubgraphTensors.from_subgraph(sg2, model.hyper.num_relations),
            h_pos=ex.h_pos[perm],
            entities=[ex.entities[p] for p in perm],
            r_t=ex.r_t,
        )
        assert example_forward(model, None, ex2).score == pytest.approx(base, abs=1e-9)

    def test_score_op_signature(self):
        rng = np.random.default_rng(9)
        model = init_model(tiny_hyper(), rng)
        ex = random_example(rng, model)
        assert score(model, ex.sg, ex.h_pos, ex.r_t) == example_forward(model, None, ex).score

    def test_empty_subgraph_finite(self):
        rng = np.random.default_rng(10)
        model = init_model(tiny_hyper(), rng)
        sg = random_subgraph(rng, 2, 0, 2)
        st = SubgraphTensors.from_subgraph(sg, 2)
        h0 = rng.standard_normal((2, 4))
        trace = score_forward(model, st, h0, 0)
        assert np.isfinite(trace.score)


class TestBasisSharing:
    def test_materialization_matches_manual_sum(self):
        rng = np.random.default_rng(11)
        model = init_model(tiny_hyper(B=3), rng)
        layer = model.layers[0]
        mats = layer.relation_matrices()
        for r in range(model.hyper.num_relations_doubled):
            manual = sum(layer.coeff[r, b] * layer.V[b] for b in range(3))
            assert np.allclose(mats[r], manual, atol=1e-14)

    def test_memory_grows_with_basis_count(self):
        many_rels = init_model(tiny_hyper(num_relations=50), np.random.default_rng(0))
        few_rels = init_model(tiny_hyper(num_relations=2), np.random.default_rng(0))
        assert many_rels.layers[0].V.shape == few_rels.layers[0].V.shape
        assert many_rels.layers[0].coeff.shape[0] == 100


class TestGradients:
    def test_finite_differences_structural(self):
        for seed in range(3):
            rng = np.random.default_rng(100 + seed)
            model = init_model(tiny_hyper(), rng)
            pairs = [(random_example(rng, model), random_example(rng, model))]
            loss = pair_loss(model, None, pairs, gamma=10.0)
            assert loss > 0.0
            assert fd_max_relative_error(model, None, pairs, gamma=10.0) < 1e-3

    def test_finite_differences_joint_semantic(self):
        rng = np.random.default_rng(200)
        hyper = tiny_hyper(semantic_enabled=True, sem_dim=3, d_p=3, dim_raw=5, n_prompts=2)
        model = init_model(hyper, rng)
        store = hash_store(dim=5, prompts=2)
        pairs = [(random_example(rng, model), random_example(rng, model))]
        assert pair_loss(model, store, pairs, gamma=10.0) > 0.0
        assert fd_max_relative_error(model, store, pairs, gamma=10.0) < 1e-3

    def test_dead_parameters_get_zero_gradient(self):
        rng = np.random.default_rng(12)
        model = init_model(tiny_hyper(), rng)
        model.W_f[...] = 0.0
        pairs = [(random_example(rng, model), random_example(rng, model))]
        loss, grads = pair_loss_and_gradients(model, None, pairs, gamma=10.0)
        assert loss == pytest.approx(10.0)  # scores are zero, margin fully violated
        assert np.any(grads["W_f"] != 0.0)
        for name, g in grads.items():
            if name != "W_f":
                assert np.all(g == 0.0), name

    def test_gradient_scales_linearly(self):
        rng = np.random.default_rng(13)
        model = init_model(tiny_hyper(), rng)
        ex = random_example(rng, model)
        trace = example_forward(model, None, ex)
        g1 = model.zero_grads()
        score_backward(model, trace, 1.0, g1)
        g3 = model.zero_grads()
        score_backward(model, trace, 3.0, g3)
        for name in g1:
            assert np.allclose(3.0 * g1[name], g3[name], atol=1e-12)

    def test_satisfied_margin_gives_zero_loss_and_grads(self):
        rng = np.random.default_rng(14)
        model = init_model(tiny_hyper(), rng)
        ex = random_example(rng, model)
        pairs = [(ex, ex)]  # identical scores, margin 0 with gamma 0
        loss, grads = pair_loss_and_gradients(model, None, pairs, gamma=0.0)
        assert loss == 0.0
        assert all(np.all(g == 0.0) for g in grads.values())


class TestCheckpoint:
    def test_save_load_save_byte_identical(self, tmp_path):
        rng = np.random.default_rng(15)
        hyper = tiny_hyper(semantic_enabled=True, sem_dim=3, d_p=3, dim_raw=5, n_prompts=2)
        model = init_model(hyper, rng)
        save_checkpoint(tmp_path / "a", model)
        loaded = load_checkpoint(tmp_path / "a")
        save_checkpoint(tmp_path / "b", loaded)
        assert (tmp_path / "a" / "params.bin").read_bytes() == (tmp_path / "b" / "params.bin").read_bytes()
        assert (tmp_path / "a" / "manifest.json").read_text() == (tmp_path / "b" / "manifest.json").read_text()

    def test_loaded_model_scores_identically(self, tmp_path):
        rng = np.random.default_rng(16)
        model = init_model(tiny_hyper(), rng)
        ex = random_example(rng, model)
        save_checkpoint(tmp_path / "ck", model)
        loaded = load_checkpoint(tmp_path / "ck")
        assert example_forward(loaded, None, ex).score == example_forward(model, None, ex).score

    def test_relation_dim_matches_node_dim_invariant(self):
        model = init_model(tiny_hyper(), np.random.default_rng(17))
        assert model.rel_emb.shape[1] == model.hyper.d0
        for i, layer in enumerate(model.layers):
            assert layer.W_rel.shape == layer.W0.shape
