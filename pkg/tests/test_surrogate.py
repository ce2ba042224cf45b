import numpy as np
import pytest

from xcpipe import synth_dataset
from xcpipe.clustering import build_cluster_tree, compute_centroids, make_meta_labels
from xcpipe.errors import DimMismatch, NonFiniteLoss
from xcpipe.nn import ResidualBlock
from xcpipe.surrogate import (
    IntermediateModel,
    SurrogateConfig,
    init_embeddings,
    train_surrogate,
)


@pytest.fixture(scope="module")
def meta_setup():
    d = synth_dataset(8, 50, 4, 16, 0.05, seed=11)
    mu, zero = compute_centroids(d)
    tree = build_cluster_tree(mu, 8, seed=1, empty_labels=zero)
    meta = make_meta_labels(d, tree)
    return d, meta


class TestInitEmbeddings:
    def test_random_rows_reproducible(self):
        a = init_embeddings(10, 4, None, seed_or_rng=3)
        b = init_embeddings(10, 4, None, seed_or_rng=3)
        np.testing.assert_array_equal(a, b)
        assert np.all(np.abs(a) <= 0.5)

    def test_pretrained_rows_exact(self):
        vecs = {1: np.asarray([9.0, -9.0]), 7: np.asarray([0.5, 0.25])}
        bank = init_embeddings(10, 2, vecs, seed_or_rng=3)
        np.testing.assert_array_equal(bank[1], [9.0, -9.0])
        np.testing.assert_array_equal(bank[7], [0.5, 0.25])

    def test_dim_mismatch(self):
        with pytest.raises(DimMismatch):
            init_embeddings(10, 2, {0: np.zeros(3)}, seed_or_rng=0)

    def test_full_vocabulary_shape(self):
        bank = init_embeddings(66666, 300, None, seed_or_rng=0)
        assert bank.shape == (66666, 300)


class TestTrainSurrogate:
    def test_epochs_zero_keeps_init(self, meta_setup):
        d, meta = meta_setup
        init = init_embeddings(d.num_features, 16, None, seed_or_rng=4)
        cfg = SurrogateConfig(dim=16, epochs=0, seed=4)
        model, log = train_surrogate(d, meta, cfg, init_bank=init)
        np.testing.assert_array_equal(model.embeddings, init)
        assert len(log) == 1
        assert np.isfinite(log[0]["mean_loss"])

    def test_planted_meta_accuracy(self, meta_setup):
        d, meta = meta_setup
        cfg = SurrogateConfig(dim=32, epochs=20, learning_rate=0.02,
                              dropout=0.2, seed=0)
        model, log = train_surrogate(d, meta, cfg)
        assert log[-1]["heldout_meta_p1"] >= 0.9

    def test_meta_accuracy_matches_linear_oracle(self, meta_setup):
        """Plain one-vs-rest logistic regression on raw counts reaches
        the same >= 0.9 top-1 on this corpus (separability witness)."""
        from sklearn.linear_model import LogisticRegression
        d, meta = meta_setup
        rng = np.random.default_rng(0)
        perm = rng.permutation(d.num_points)
        held, train = perm[:20], perm[20:]
        probs = np.zeros((held.size, meta.num_clusters))
        dense_meta = np.asarray(meta.meta_positives.todense())
        for k in range(meta.num_clusters):
            y = dense_meta[train, k]
            clf = LogisticRegression(max_iter=200)
            clf.fit(d.features[train], y)
            probs[:, k] = clf.predict_proba(d.features[held])[:, 1]
        top = probs.argmax(axis=1)
        hits = sum(dense_meta[i, t] == 1.0 for i, t in zip(held, top))
        assert hits / held.size >= 0.9

    def test_loss_non_increasing_early(self, meta_setup):
        d, meta = meta_setup
        cfg = SurrogateConfig(dim=32, epochs=3, learning_rate=0.02,
                              dropout=0.0, seed=2)
        _, log = train_surrogate(d, meta, cfg)
        losses = [rec["mean_loss"] for rec in log]
        upticks = sum(1 for a, b in zip(losses, losses[1:])
                      if b > a * 1.01)
        assert upticks <= 1

    def test_determinism_bit_identical(self, meta_setup):
        d, meta = meta_setup
        cfg = SurrogateConfig(dim=16, epochs=3, dropout=0.5, seed=9)
        m1, _ = train_surrogate(d, meta, cfg)
        m2, _ = train_surrogate(d, meta, cfg)
        np.testing.assert_array_equal(m1.embeddings, m2.embeddings)

    def test_artifact_holds_embeddings_only(self, meta_setup):
        d, meta = meta_setup
        cfg = SurrogateConfig(dim=8, epochs=1, seed=0)
        model, _ = train_surrogate(d, meta, cfg)
        assert isinstance(model, IntermediateModel)
        assert set(model.__dataclass_fields__) == {"embeddings"}

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_loss_aborts(self, meta_setup):
        """A corrupted initial bank (NaN row) must abort with
        diagnostics, not train through silently."""
        d, meta = meta_setup
        init = init_embeddings(d.num_features, 8, None, seed_or_rng=0)
        init[3, :] = np.nan
        cfg = SurrogateConfig(dim=8, epochs=2, seed=0)
        with pytest.raises(NonFiniteLoss) as exc:
            train_surrogate(d, meta, cfg, init_bank=init)
        assert exc.value.stage == "surrogate"

    def test_spectral_budget_after_every_step(self, meta_setup, monkeypatch):
        """SVD-oracle the residual right after each projection."""
        d, meta = meta_setup
        seen = []
        original = ResidualBlock.project

        def spy(self):
            sigma_hat = original(self)
            seen.append(np.linalg.svd(self.matrix, compute_uv=False)[0]
                        / self.lam)
            return sigma_hat

        monkeypatch.setattr(ResidualBlock, "project", spy)
        cfg = SurrogateConfig(dim=16, epochs=2, spectral_budget=0.4, seed=1)
        train_surrogate(d, meta, cfg)
        assert seen
        assert max(seen) <= 1.001
