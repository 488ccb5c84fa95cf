import numpy as np
import pytest

from kglp.errors import DataError
from kglp.kgdata import KnowledgeGraph, Triple
from kglp.train import (
    AdamState,
    TrainConfig,
    adam_step,
    fit,
    margin_loss,
    parse_config_file,
    sample_negative,
)
from kglp.toy import rule_bundle

from conftest import graph_of


class TestSampleNegative:
    def test_two_entity_graph_tail_side(self):
        g = graph_of([(0, 0, 1)])
        rng = np.random.default_rng(0)
        seen = {sample_negative(g, Triple(0, 0, 1), rng).as_tuple() for _ in range(50)}
        # only (0,r,0) and (1,r,1) are valid corruptions
        assert seen <= {(0, 0, 0), (1, 0, 1)}

    def test_two_entity_graph_exhausts_without_self(self):
        g = graph_of([(0, 0, 1)])
        rng = np.random.default_rng(0)
        with pytest.raises(DataError, match="exhausted"):
            sample_negative(g, Triple(0, 0, 1), rng, exclude_self=True, max_tries=500)

    def test_deterministic_sequence(self):
        g = graph_of([(i, 0, i + 1) for i in range(9)])
        t = Triple(0, 0, 1)
        seq_a = [sample_negative(g, t, np.random.default_rng(42)).as_tuple() for _ in range(1)]
        for _ in range(3):
            assert [sample_negative(g, t, np.random.default_rng(42)).as_tuple()] == seq_a

    def test_never_returns_known_triple(self):
        g = graph_of([(i, 0, (i + 1) % 10) for i in range(10)])
        rng = np.random.default_rng(1)
        for t in g.triples[:5]:
            for _ in range(50):
                neg = sample_negative(g, t, rng)
                assert neg.as_tuple() not in g.triple_set
                assert neg != t

    def test_head_tail_split_binomial(self):
        g = graph_of([(i, 0, (i + 3) % 10) for i in range(10)])
        rng = np.random.default_rng(7)
        t = Triple(0, 0, 3)
        heads = 0
        n = 1000
        for _ in range(n):
            neg = sample_negative(g, t, rng)
            if neg.head != t.head:
                heads += 1
        sigma = np.sqrt(0.25 / n)
        assert abs(heads / n - 0.5) < 5 * sigma

    def test_single_entity_rejected(self):
        g = graph_of([(0, 0, 0)])
        with pytest.raises(DataError):
            sample_negative(g, Triple(0, 0, 0), np.random.default_rng(0))


class TestMarginLoss:
    def test_violated_margin(self):
        assert margin_loss([5.0], [1.0], gamma=10.0) == 6.0

    def test_satisfied_margin(self):
        assert margin_loss([20.0], [1.0], gamma=10.0) == 0.0

    def test_sum_over_pairs(self):
        assert margin_loss([5.0, 20.0], [1.0, 1.0], gamma=10.0) == 6.0

    def test_nonnegative_and_zero_iff_satisfied(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            pos = rng.standard_normal(8) * 5
            neg = rng.standard_normal(8) * 5
            loss = margin_loss(pos, neg, gamma=1.0)
            assert loss >= 0.0
            assert (loss == 0.0) == bool(np.all(pos >= neg + 1.0))

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            margin_loss([1.0], [1.0, 2.0], gamma=1.0)


class TestAdam:
    def params(self):
        return {"w": np.array([1.0, -2.0, 3.0])}

    def test_zero_gradient_is_identity(self):
        p = self.params()
        before = p["w"].copy()
        state = AdamState(p)
        for _ in range(5):
            adam_step(state, p, {"w": np.zeros(3)}, lr=0.1)
        assert np.array_equal(p["w"], before)

    def test_single_step_hand_oracle(self):
        # fresh state, gradient g: delta = -lr * g / (|g| + eps)
        p = {"w": np.array([0.5, -0.5])}
        g = np.array([0.3, -0.2])
        state = AdamState(p)
        adam_step(state, p, {"w": g.copy()}, lr=0.01)
        expect = np.array([0.5, -0.5]) - 0.01 * g / (np.abs(g) + 1e-8)
        assert np.allclose(p["w"], expect, atol=1e-12)

    def test_constant_gradient_step_magnitude_approaches_lr(self):
        p = {"w": np.array([0.0])}
        g = {"w": np.array([0.7])}
        state = AdamState(p)
        prev = p["w"].copy()
        for _ in range(200):
            prev = p["w"].copy()
            adam_step(state, p, g, lr=0.05)
        assert abs(abs((p["w"] - prev)[0]) - 0.05) < 1e-3

    def test_nonfinite_gradient_aborts(self):
        p = self.params()
        state = AdamState(p)
        with pytest.raises(Exception, match="w"):
            adam_step(state, p, {"w": np.array([1.0, np.nan, 0.0])}, lr=0.1)

    def test_moment_shapes_mirror_params(self):
        p = {"a": np.zeros((2, 3)), "b": np.zeros(4)}
        state = AdamState(p)
        assert state.m["a"].shape == (2, 3)
        assert state.v["b"].shape == (4,)


class TestConfig:
    def test_defaults_match_training_recipe(self):
        c = TrainConfig()
        assert (c.lr, c.epochs, c.patience, c.batch, c.margin, c.hops, c.sem_dim) == (
            1e-3, 50, 100, 16, 10.0, 3, 24)
        assert c.layer0_dim == 32

    def test_layer0_dim_derived(self):
        assert TrainConfig(hops=2, sem_dim=10).layer0_dim == 16

    def test_nonpositive_rejected(self):
        with pytest.raises(DataError):
            TrainConfig(lr=-1.0)
        with pytest.raises(DataError):
            TrainConfig(epochs=0)

    def test_config_file_parsing(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("lr = 0.01\nepochs = 3\nsemantic_enabled = false\naggregation = mean\n")
        values = parse_config_file(path)
        assert values == {"lr": 0.01, "epochs": 3, "semantic_enabled": False, "aggregation": "mean"}

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("nope = 1\n")
        with pytest.raises(DataError, match="nope"):
            parse_config_file(path)

    def test_missing_file(self):
        with pytest.raises(DataError):
            parse_config_file("/nonexistent.cfg")


def small_toy(seed=0):
    return rule_bundle(seed=seed, n_train=12, n_test=6, block_size=6, test_block_size=6, dim_raw=8)


class TestFit:
    def test_zero_lr_leaves_parameters_unchanged(self):
        from kglp.gnn import ModelHyper, init_model

        toy = small_toy()
        config = TrainConfig(lr=0.0, epochs=2, seed=0, hops=2, sem_dim=8, d_p=8,
                             hidden=8, layers=2)
        model, _ = fit(toy.bundle, config, toy.store)
        fresh = init_model(ModelHyper(
            num_relations=len(toy.bundle.vocab.relation_names), k=2, L=2, B=config.bases,
            hidden=8, sem_dim=8, d_p=8, dim_raw=toy.store.dim,
            n_prompts=toy.store.num_prompts, semantic_enabled=True, seed=0,
        ))
        for name, arr in model.tensors().items():
            assert np.array_equal(arr, fresh.tensors()[name]), name

    def test_same_seed_same_log(self):
        toy = small_toy()
        config = TrainConfig(epochs=3, seed=5, hops=2, sem_dim=8, d_p=8, hidden=8, layers=2)
        model_a, log_a = fit(toy.bundle, config, toy.store)
        model_b, log_b = fit(toy.bundle, config, toy.store)
        assert [(r.batch, r.train_loss, r.val_mrr, r.best) for r in log_a] == \
               [(r.batch, r.train_loss, r.val_mrr, r.best) for r in log_b]
        for name, arr in model_a.tensors().items():
            assert np.array_equal(arr, model_b.tensors()[name])

    def test_loss_decreases_early(self):
        """Epoch-mean loss over the first five epochs of the 30-entity toy,
        measured across 20 seeds. Values frozen from an empirical run of the
        finished system: every seed at least halves its loss and is strictly
        monotone over the first four epochs; near convergence the resampled-
        negative hinge fluctuates, so full 5-epoch monotonicity holds for 15."""
        strict5 = net = strict4 = 0
        for seed in range(20):
            toy = rule_bundle(seed=seed, n_train=30)
            losses = _epoch_losses(toy, TrainConfig(seed=seed), epochs=5)
            strict5 += all(b < a for a, b in zip(losses, losses[1:]))
            net += losses[4] < 0.5 * losses[0]
            strict4 += all(b < a for a, b in zip(losses[:4], losses[1:4]))
        assert net == 20
        assert strict4 == 20
        assert strict5 >= 15

    def test_empty_train_rejected(self):
        toy = small_toy()
        bundle = toy.bundle
        bundle.train = KnowledgeGraph([])
        with pytest.raises(DataError):
            fit(bundle, TrainConfig(epochs=1), toy.store)

    def test_empty_validation_warns_and_runs(self):
        toy = small_toy()
        toy.bundle.valid = KnowledgeGraph([])
        config = TrainConfig(epochs=1, seed=0, hops=2, sem_dim=8, d_p=8, hidden=8, layers=2)
        with pytest.warns(UserWarning, match="early stopping"):
            model, records = fit(toy.bundle, config, toy.store)
        assert records == []


def _epoch_losses(toy, config, epochs):
    """Mean per-pair batch loss per epoch, via single-epoch incremental runs."""
    import kglp.train as train_mod
    from kglp.gnn import init_model, ModelHyper, pair_loss_and_gradients
    from kglp.train import AdamState, sample_negative, ExtractionCache

    bundle, store = toy.bundle, toy.store
    hyper = ModelHyper(
        num_relations=len(bundle.vocab.relation_names), k=config.hops, L=config.layers,
        B=config.bases, hidden=config.hidden, sem_dim=config.sem_dim, d_p=config.d_p,
        dim_raw=store.dim, n_prompts=store.num_prompts,
        aggregation=config.aggregation, semantic_enabled=True, seed=config.seed,
    )
    rng = np.random.default_rng(config.seed)
    model = init_model(hyper, np.random.Generator(np.random.PCG64(config.seed)))
    adam = AdamState(model.tensors())
    cache = ExtractionCache(bundle.train, bundle.vocab.entity_names, config.hops, hyper.num_relations)
    losses = []
    positives = list(bundle.train.triples)
    for _ in range(epochs):
        order = rng.permutation(len(positives))
        epoch_loss = []
        for start in range(0, len(order), config.batch):
            pairs = []
            for i in order[start:start + config.batch]:
                pos = positives[int(i)]
                neg = sample_negative(bundle.train, pos, rng)
                pairs.append((cache.example(pos), cache.example(neg)))
            loss, grads = pair_loss_and_gradients(model, store, pairs, config.margin)
            adam.step(model.tensors(), grads, config.lr)
            epoch_loss.append(loss / len(pairs))
        losses.append(float(np.mean(epoch_loss)))
    return losses
