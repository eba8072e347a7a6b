import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import pmsacl.losses as losses_mod
from pmsacl.errors import ConfigError, DegenerateEmbeddingError, NumericError
from pmsacl.losses import (
    ClassCentres,
    EmbeddingBatch,
    LossSwitches,
    TemperatureSchedule,
    aug_classification_loss,
    centre_normalize,
    centring_loss,
    compute_centres,
    pmsacl_loss,
    position_loss,
    total_loss,
)
from pmsacl.medmix import AugConfig
from pmsacl.numerics import RngStream, finite_diff_grad, max_relative_error


def make_batch(rng, b=8, z=6, n_classes=3, dtype=np.float64):
    emb = rng.normal((b, z)).astype(dtype)
    classes = np.asarray(rng.integers(0, n_classes, b // 2)).repeat(2)
    views = np.tile([0, 1], b // 2)
    sids = [f"s{i}" for i in range(b // 2) for _ in range(2)]
    return EmbeddingBatch(emb, classes, views, sids)


def brute_force_contrastive(batch: EmbeddingBatch, centres, schedule) -> float:
    """Direct double-loop evaluation of the centre-normalised contrastive
    loss; the independent oracle."""
    z = batch.embeddings.astype(np.float64)
    cls = batch.class_indices
    sib = batch.sibling_indices()
    diff = z - centres.centres[cls].astype(np.float64)
    unit = diff / np.linalg.norm(diff, axis=1, keepdims=True)
    total = 0.0
    b = len(z)
    for a in range(b):
        numerator = np.exp(unit[a] @ unit[sib[a]] / schedule.tau)
        denominator = 0.0
        for j in range(b):
            if j == a:
                continue
            k = schedule.inverse_temperature(int(cls[a]), int(cls[j]))
            denominator += np.exp(k * (unit[a] @ unit[j]))
        total += -np.log(numerator / denominator)
    return total / b


def nt_xent_oracle(unit: np.ndarray, tau: float) -> float:
    """Standard normalised-temperature contrastive loss on pre-normalised
    two-view embeddings ordered [v0, v1, v0, v1, ...]."""
    b = len(unit)
    total = 0.0
    for a in range(b):
        sib = a + 1 if a % 2 == 0 else a - 1
        logits = np.array([unit[a] @ unit[j] / tau for j in range(b) if j != a])
        pos = unit[a] @ unit[sib] / tau
        total += -(pos - np.log(np.sum(np.exp(logits))))
    return total / b


class TestCentres:
    def test_single_image_single_draw(self):
        rng = RngStream(1, "c")
        img = rng.uniform((16, 16, 3)).astype(np.float32)
        calls = []

        def encode(batch):
            calls.append(batch)
            return np.full((len(batch), 4), float(len(calls)), dtype=np.float32)

        cfg = AugConfig(n_classes=2, patch_min=0.3, patch_max=0.4)
        centres = compute_centres(encode, [("a", img)], cfg, rng.child("r"))
        assert centres.centres.shape == (2, 4)
        assert np.allclose(centres.centres[0], 1.0)
        assert np.allclose(centres.centres[1], 2.0)
        assert centres.frozen

    def test_mean_of_two_embeddings(self):
        rng = RngStream(2, "c")
        imgs = [("a", rng.uniform((16, 16, 3)).astype(np.float32)),
                ("b", rng.uniform((16, 16, 3)).astype(np.float32))]
        table = iter([np.array([[1.0, 0.0], [3.0, 2.0]]), np.array([[5.0, 1.0], [7.0, 3.0]])])

        def encode(batch):
            return next(table)

        cfg = AugConfig(n_classes=2, patch_min=0.3, patch_max=0.4)
        centres = compute_centres(encode, imgs, cfg, rng.child("r"))
        assert np.allclose(centres.centres[0], [2.0, 1.0])
        assert np.allclose(centres.centres[1], [6.0, 2.0])

    def test_frozen_centres_refuse_replacement(self):
        centres = ClassCentres(np.zeros((2, 3)), frozen=True)
        with pytest.raises(ConfigError, match="frozen"):
            centres.replaced(np.ones((2, 3)))

    def test_reestimate_allows_period_boundary(self):
        centres = ClassCentres(np.zeros((2, 3)), frozen=True, strategy="re-estimate")
        replaced = centres.replaced(np.ones((2, 3)), at_period_boundary=True)
        assert np.all(replaced.centres == 1.0)
        with pytest.raises(ConfigError):
            centres.replaced(np.ones((2, 3)), at_period_boundary=False)

    def test_random_and_equidistant(self):
        rng = RngStream(3, "c")
        cfg = AugConfig(n_classes=4)
        rand = compute_centres(None, [], cfg, rng, strategy="random", embed_dim=8)
        assert rand.centres.shape == (4, 8)
        eq = compute_centres(None, [], cfg, rng, strategy="equidistant", embed_dim=8)
        dots = eq.centres @ eq.centres.T
        assert np.allclose(dots, np.eye(4))

    def test_empty_dataset(self):
        with pytest.raises(NumericError):
            compute_centres(lambda b: b, [], AugConfig(), RngStream(0, "x"))


class TestCentringLoss:
    def test_zero_at_centres(self, rng):
        centres = ClassCentres(rng.normal((3, 5)))
        emb = centres.centres[[0, 0, 1, 1]].copy()
        batch = EmbeddingBatch(emb, [0, 0, 1, 1], [0, 1, 0, 1], ["a", "a", "b", "b"])
        loss, grad = centring_loss(batch, centres)
        assert loss == 0.0
        assert np.all(grad == 0.0)

    def test_single_sample_distance_squared(self):
        centres = ClassCentres(np.zeros((1, 2)))
        emb = np.array([[3.0, 4.0], [0.0, 0.0]])
        batch = EmbeddingBatch(emb, [0, 0], [0, 1], ["a", "a"])
        loss, _ = centring_loss(batch, centres)
        assert loss == pytest.approx(25.0 / 2)

    def test_against_direct_sum_oracle(self, rng):
        batch = make_batch(rng.child("b"))
        centres = ClassCentres(rng.normal((3, 6)))
        loss, grad = centring_loss(batch, centres)
        direct = np.mean([
            np.sum((batch.embeddings[i] - centres.centres[batch.class_indices[i]]) ** 2)
            for i in range(len(batch.embeddings))
        ])
        assert loss == pytest.approx(direct, abs=1e-10)
        fd = finite_diff_grad(
            lambda v: centring_loss(
                EmbeddingBatch(v.reshape(batch.embeddings.shape), batch.class_indices,
                               batch.view_indices, batch.source_ids), centres)[0],
            batch.embeddings.reshape(-1),
        )
        assert max_relative_error(grad.reshape(-1), fd) < 1e-6

    def test_gradient_formula(self, rng):
        batch = make_batch(rng.child("b"), b=4)
        centres = ClassCentres(rng.normal((3, 6)))
        _, grad = centring_loss(batch, centres)
        expected = 2.0 * (batch.embeddings - centres.centres[batch.class_indices]) / 4
        assert np.allclose(grad, expected, atol=1e-12)


class TestCentreNormalize:
    def test_simple_direction(self):
        out = centre_normalize(np.array([2.0, 0.0]), np.array([1.0, 0.0]))
        assert np.allclose(out, [1.0, 0.0])

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_unit_norm(self, seed):
        rng = RngStream(seed, "n")
        emb, centre = rng.normal(5), rng.normal(5)
        out = centre_normalize(emb, centre)
        assert np.linalg.norm(out) == pytest.approx(1.0, abs=1e-6)

    def test_degenerate(self):
        v = np.array([1.0, 2.0])
        with pytest.raises(DegenerateEmbeddingError):
            centre_normalize(v, v)


class TestTemperature:
    def test_same_class_value(self):
        sched = TemperatureSchedule(tau=0.2, alpha=2.0)
        assert sched.inverse_temperature(1, 1) == pytest.approx(2.5)

    def test_cross_class_value(self):
        sched = TemperatureSchedule(tau=0.2, alpha=2.0)
        assert sched.inverse_temperature(0, 1) == pytest.approx(5.0)

    def test_degenerate_alpha(self):
        sched = TemperatureSchedule(tau=0.3, alpha=1.0)
        assert sched.inverse_temperature(0, 0) == sched.inverse_temperature(0, 1)

    def test_invalid(self):
        with pytest.raises(ConfigError):
            TemperatureSchedule(tau=0.0)


class TestContrastiveLoss:
    @pytest.mark.parametrize("seed", range(10))
    def test_matches_brute_force_small_batches(self, seed):
        rng = RngStream(seed, "bf")
        b = 2 * int(rng.integers(1, 5))
        batch = make_batch(rng.child("b"), b=b, z=5, n_classes=3)
        centres = ClassCentres(rng.normal((3, 5)))
        sched = TemperatureSchedule(tau=0.2, alpha=2.0)
        loss, _ = pmsacl_loss(batch, centres, sched)
        assert loss == pytest.approx(brute_force_contrastive(batch, centres, sched), abs=1e-10)

    def test_view_swap_invariance(self, rng):
        batch = make_batch(rng.child("b"))
        centres = ClassCentres(rng.normal((3, 6)))
        sched = TemperatureSchedule()
        loss, _ = pmsacl_loss(batch, centres, sched)
        swapped = EmbeddingBatch(batch.embeddings, batch.class_indices,
                                 1 - batch.view_indices, batch.source_ids)
        loss2, _ = pmsacl_loss(swapped, centres, sched)
        assert loss == pytest.approx(loss2, abs=1e-12)

    def test_single_class_alpha_one_equals_nt_xent(self, rng):
        b, z = 8, 5
        emb = rng.normal((b, z))
        centres = ClassCentres(rng.normal((1, z)))
        batch = EmbeddingBatch(emb, [0] * b, np.tile([0, 1], b // 2),
                               [f"s{i}" for i in range(b // 2) for _ in range(2)])
        sched = TemperatureSchedule(tau=0.25, alpha=1.0)
        loss, _ = pmsacl_loss(batch, centres, sched)
        diff = emb - centres.centres[0]
        unit = diff / np.linalg.norm(diff, axis=1, keepdims=True)
        assert loss == pytest.approx(nt_xent_oracle(unit, 0.25), abs=1e-10)

    def test_gradient_against_fd(self, rng):
        batch = make_batch(rng.child("b"))
        centres = ClassCentres(rng.normal((3, 6)))
        sched = TemperatureSchedule(tau=0.3, alpha=2.0)
        _, grad = pmsacl_loss(batch, centres, sched)
        fd = finite_diff_grad(
            lambda v: pmsacl_loss(
                EmbeddingBatch(v.reshape(batch.embeddings.shape), batch.class_indices,
                               batch.view_indices, batch.source_ids), centres, sched)[0],
            batch.embeddings.reshape(-1),
        )
        assert max_relative_error(grad.reshape(-1), fd, floor=1e-4) < 1e-6

    def test_degenerate_embedding_propagates(self, rng):
        centres = ClassCentres(np.zeros((1, 3)))
        emb = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        batch = EmbeddingBatch(emb, [0, 0], [0, 1], ["a", "a"])
        with pytest.raises(DegenerateEmbeddingError):
            pmsacl_loss(batch, centres, TemperatureSchedule())

    def test_unpaired_batch_rejected(self, rng):
        emb = rng.normal((3, 4))
        with pytest.raises(ConfigError):
            EmbeddingBatch(emb, [0, 0, 1], [0, 1, 0], ["a", "a", "b"]).sibling_indices()

    def test_same_class_repulsion_weaker_at_equal_similarity(self):
        """With alpha > 1 and equal non-negative similarity, the softmax
        weight times inverse temperature is strictly smaller for the
        same-class denominator sample."""
        rng = RngStream(77, "rep")
        for _ in range(100):
            tau = 0.05 + float(rng.uniform()) * 0.95
            alpha = 1.0 + 1e-3 + float(rng.uniform()) * 7.0
            sim = float(rng.uniform())  # equal similarity in [0, 1]
            k_same = 1.0 / (alpha * tau)
            k_cross = 1.0 / tau
            same_strength = k_same * np.exp(k_same * sim)
            cross_strength = k_cross * np.exp(k_cross * sim)
            assert same_strength < cross_strength

    def test_repulsion_property_boundary(self):
        """The same-class damping inverts once similarity is negative enough
        (threshold -alpha tau ln(alpha) / (alpha - 1)); document the regime
        the property holds in."""
        tau, alpha = 0.2, 2.0
        threshold = -alpha * tau * np.log(alpha) / (alpha - 1.0)
        k_same, k_cross = 1.0 / (alpha * tau), 1.0 / tau
        just_above = threshold + 1e-6
        just_below = threshold - 1e-6
        assert k_same * np.exp(k_same * just_above) < k_cross * np.exp(k_cross * just_above)
        assert k_same * np.exp(k_same * just_below) > k_cross * np.exp(k_cross * just_below)

    def test_argmin_structure_on_2d_grid(self):
        """Grid search over 2-D toy geometry: the contrastive loss over a
        two-source, two-class batch is minimised when siblings align and the
        classes sit antipodally after centring."""
        centres = ClassCentres(np.zeros((2, 2)))
        sched = TemperatureSchedule(tau=0.2, alpha=2.0)

        def config_loss(theta_a, theta_b):
            emb = np.array([
                [np.cos(theta_a), np.sin(theta_a)],
                [np.cos(theta_a), np.sin(theta_a)],
                [np.cos(theta_b), np.sin(theta_b)],
                [np.cos(theta_b), np.sin(theta_b)],
            ])
            batch = EmbeddingBatch(emb, [0, 0, 1, 1], [0, 1, 0, 1], ["a", "a", "b", "b"])
            return pmsacl_loss(batch, centres, sched)[0]

        angles = np.linspace(0.0, 2 * np.pi, 25)[:-1]
        grid = {(ta, tb): config_loss(ta, tb) for ta in angles for tb in angles}
        best = min(grid, key=grid.get)
        separation = (best[0] - best[1]) % (2 * np.pi)
        assert min(abs(separation - np.pi), abs(separation + np.pi - 2 * np.pi)) < 2 * np.pi / 24 + 1e-9
        # centring attains zero exactly at the centres
        emb = centres.centres[[0, 0, 1, 1]]
        assert centring_loss(EmbeddingBatch(emb, [0, 0, 1, 1], [0, 1, 0, 1],
                                            ["a", "a", "b", "b"]), centres)[0] == 0.0


class TestCrossEntropies:
    def test_perfect_prediction_zero(self):
        probs = np.eye(4)[[0, 2, 3]]
        loss, _ = aug_classification_loss(probs, [0, 2, 3])
        assert loss == pytest.approx(0.0, abs=1e-9)

    def test_uniform_is_log4(self):
        probs = np.full((5, 4), 0.25)
        loss, _ = aug_classification_loss(probs, [0, 1, 2, 3, 0])
        assert loss == pytest.approx(np.log(4.0), abs=1e-9)

    def test_uniform_position_is_log8(self):
        probs = np.full((3, 8), 0.125)
        loss, _ = position_loss(probs, [0, 4, 7])
        assert loss == pytest.approx(np.log(8.0), abs=1e-9)

    def test_against_direct_oracle(self, rng):
        logits = rng.normal((6, 4))
        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        targets = np.asarray(rng.integers(0, 4, 6))
        loss, _ = aug_classification_loss(probs, targets)
        direct = -np.mean([np.log(probs[i, targets[i]]) for i in range(6)])
        assert loss == pytest.approx(direct, abs=1e-10)

    def test_row_sum_precondition(self):
        bad = np.array([[0.5, 0.2, 0.1, 0.1]])
        with pytest.raises(NumericError):
            aug_classification_loss(bad, [0])

    def test_clamp_warning_counter(self):
        losses_mod.CLAMP_WARNINGS = 0
        probs = np.array([[1.0, 0.0, 0.0, 0.0]])
        loss, grad = aug_classification_loss(probs, [1])
        assert losses_mod.CLAMP_WARNINGS == 1
        assert np.isfinite(loss)

    def test_position_needs_8_classes(self):
        with pytest.raises(ConfigError):
            position_loss(np.full((2, 4), 0.25), [0, 1])


class TestTotalLoss:
    def test_all_zero(self):
        parts = {name: (0.0, {}) for name in ("centring", "contrastive", "aug_class", "position")}
        total, grads = total_loss(parts, LossSwitches())
        assert total == 0.0 and grads == {}

    def test_single_term(self):
        g = np.ones((2, 2))
        parts = {"centring": (1.5, {"embeddings": g}),
                 "contrastive": (2.5, {"embeddings": g})}
        switches = LossSwitches(use_contrastive=False, use_aug_class=False, use_position=False)
        total, grads = total_loss(parts, switches)
        assert total == 1.5
        assert np.array_equal(grads["embeddings"], g)

    def test_additivity(self, rng):
        g1, g2 = rng.normal((3, 2)), rng.normal((3, 2))
        parts = {"centring": (1.0, {"embeddings": g1}),
                 "contrastive": (2.0, {"embeddings": g2}),
                 "aug_class": (0.5, {}),
                 "position": (0.25, {})}
        total, grads = total_loss(parts, LossSwitches())
        assert total == pytest.approx(3.75, abs=1e-12)
        assert np.allclose(grads["embeddings"], g1 + g2, atol=1e-12)

    def test_weights_apply(self, rng):
        g = rng.normal((2, 2))
        parts = {"centring": (2.0, {"embeddings": g})}
        switches = LossSwitches(use_contrastive=False, use_aug_class=False,
                                use_position=False, weights={"centring": 0.5})
        total, grads = total_loss(parts, switches)
        assert total == pytest.approx(1.0)
        assert np.allclose(grads["embeddings"], 0.5 * g)
