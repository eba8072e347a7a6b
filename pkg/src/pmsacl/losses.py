"""The pre-training objective: frozen class centres, a multi-centring pull
term, a centre-normalised contrastive term with per-pair temperature
scaling, and the two pretext cross-entropies (augmentation class and
relative patch position).

Every loss returns (scalar, analytic gradient); the finite-difference
checker in :mod:`pmsacl.numerics` is the independent oracle for all of
them. Losses compute in the dtype of their inputs: float32 during training,
float64 under the oracles.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DegenerateEmbeddingError, NumericError
from .medmix import AugConfig, strong_augment, weak_augment
from .numerics import RngStream

NORM_EPS = 1e-12
PROB_CLAMP = 1e-12

# Probability clamps observed by the cross-entropy losses (degenerate head
# outputs); reset freely in tests.
CLAMP_WARNINGS = 0


@dataclass
class TemperatureSchedule:
    """Base temperature plus the same-class shrinkage factor.

    The contrastive denominator uses inverse temperature 1/(scale * tau)
    when anchor and other sample share a class, 1/tau otherwise, so with
    scale > 1 same-class samples repel more weakly.
    """

    tau: float = 0.2
    alpha: float = 2.0

    def __post_init__(self) -> None:
        if self.tau <= 0 or self.alpha <= 0:
            raise ConfigError(f"temperature parameters must be positive, got tau={self.tau}, alpha={self.alpha}")

    def inverse_temperature(self, class_a: int, class_b: int) -> float:
        if class_a == class_b:
            return 1.0 / (self.alpha * self.tau)
        return 1.0 / self.tau

    def pair_matrix(self, classes: np.ndarray) -> np.ndarray:
        same = classes[:, None] == classes[None, :]
        return np.where(same, 1.0 / (self.alpha * self.tau), 1.0 / self.tau)


@dataclass
class ClassCentres:
    """Per-class mean embeddings, frozen once estimated.

    Under the default strategy the centres come from the untrained encoder
    at the start of training and never move; the re-estimate strategy may
    replace them, but only at its period boundaries.
    """

    centres: np.ndarray  # (n_classes, embed_dim)
    frozen: bool = True
    strategy: str = "untrained-encoder"

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.centres)):
            raise NumericError("non-finite class centres")

    @property
    def n_classes(self) -> int:
        return self.centres.shape[0]

    def replaced(self, new_centres: np.ndarray, at_period_boundary: bool = False) -> "ClassCentres":
        """Return centres with a new estimate; forbidden while frozen unless
        the strategy is re-estimate and we sit on a period boundary."""
        if self.frozen and not (self.strategy == "re-estimate" and at_period_boundary):
            raise ConfigError("class centres are frozen; re-estimation violates the training contract")
        return replace(self, centres=np.asarray(new_centres))


@dataclass
class EmbeddingBatch:
    """Raw encoder outputs for a two-view batch."""

    embeddings: np.ndarray  # (B, Z)
    class_indices: np.ndarray  # (B,) ints
    view_indices: np.ndarray  # (B,) in {0, 1}
    source_ids: list[str]

    def __post_init__(self) -> None:
        self.class_indices = np.asarray(self.class_indices, dtype=np.int64)
        self.view_indices = np.asarray(self.view_indices, dtype=np.int64)
        b = self.embeddings.shape[0]
        if not (len(self.source_ids) == self.class_indices.size == self.view_indices.size == b):
            raise ConfigError("embedding batch field lengths disagree")

    def sibling_indices(self) -> np.ndarray:
        """Index of the other view of each sample's source; validates pairing."""
        lookup: dict[tuple[str, int], int] = {}
        for i, (sid, view) in enumerate(zip(self.source_ids, self.view_indices)):
            key = (sid, int(view))
            if key in lookup:
                raise ConfigError(f"duplicate (source, view) pair {key}")
            lookup[key] = i
        sib = np.empty(len(self.source_ids), dtype=np.int64)
        for i, (sid, view) in enumerate(zip(self.source_ids, self.view_indices)):
            other = (sid, 1 - int(view))
            if other not in lookup:
                raise ConfigError(f"source {sid!r} is missing view {1 - int(view)}")
            sib[i] = lookup[other]
        return sib


# ---------------------------------------------------------------------------
# Centre estimation
# ---------------------------------------------------------------------------


def compute_centres(
    encode_fn,
    dataset: list[tuple[str, np.ndarray]],
    aug_cfg: AugConfig,
    rng: RngStream,
    strategy: str = "untrained-encoder",
    embed_dim: int | None = None,
) -> ClassCentres:
    """Estimate one mean embedding per augmentation class.

    Default strategy draws one augmented view per (image, class) with the
    supplied (untrained) encoder and freezes the means. ``random`` and
    ``equidistant`` skip the encoder entirely; ``re-estimate`` produces
    unfrozen centres meant to be replaced at period boundaries.
    """
    if strategy in ("random", "equidistant"):
        if embed_dim is None:
            raise ConfigError(f"strategy {strategy!r} needs embed_dim")
        if strategy == "random":
            centres = rng.normal((aug_cfg.n_classes, embed_dim)) / np.sqrt(embed_dim)
        else:
            centres = np.zeros((aug_cfg.n_classes, embed_dim))
            for n in range(aug_cfg.n_classes):
                centres[n, n % embed_dim] = 1.0
        return ClassCentres(centres.astype(np.float32), frozen=True, strategy=strategy)
    if strategy not in ("untrained-encoder", "re-estimate"):
        raise ConfigError(f"unknown centre strategy {strategy!r}")
    if not dataset:
        raise NumericError("cannot estimate centres from an empty dataset")
    donor_pool = [img for _, img in dataset]
    sums = None
    for n in range(aug_cfg.n_classes):
        views = []
        for sid, img in dataset:
            srng = rng.child("centre", n, sid)
            strong, _ = strong_augment(img, n, srng.child("strong"), aug_cfg, donor_pool)
            views.append(weak_augment(strong, srng.child("weak"), aug_cfg))
        emb = encode_fn(np.stack(views))
        if sums is None:
            sums = np.zeros((aug_cfg.n_classes, emb.shape[1]), dtype=np.float64)
        sums[n] = emb.astype(np.float64).mean(axis=0)
    centres = sums.astype(np.float32)
    return ClassCentres(centres, frozen=(strategy == "untrained-encoder"), strategy=strategy)


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------


def centring_loss(batch: EmbeddingBatch, centres: ClassCentres) -> tuple[float, np.ndarray]:
    """Mean squared distance of each embedding to its class centre.

    Gradient w.r.t. the embeddings is 2 (z - c) / B.
    """
    if int(batch.class_indices.max(initial=0)) >= centres.n_classes:
        raise ConfigError("class index outside centre table")
    z = batch.embeddings
    diff = z - centres.centres[batch.class_indices].astype(z.dtype)
    b = z.shape[0]
    loss = float(np.sum(diff * diff) / b)
    return loss, (2.0 / b) * diff


def centre_normalize(embedding: np.ndarray, centre: np.ndarray) -> np.ndarray:
    """Unit vector of (embedding - centre); errors when the difference is
    numerically zero."""
    diff = np.asarray(embedding, dtype=np.float64) - np.asarray(centre, dtype=np.float64)
    norm = float(np.linalg.norm(diff))
    if norm <= NORM_EPS:
        raise DegenerateEmbeddingError(f"embedding within {NORM_EPS} of its centre")
    return diff / norm


def pmsacl_loss(
    batch: EmbeddingBatch,
    centres: ClassCentres,
    schedule: TemperatureSchedule,
) -> tuple[float, np.ndarray]:
    """Centre-normalised contrastive loss over a two-view batch.

    Each anchor attracts its sibling view (inverse temperature 1/tau in the
    numerator) and is repelled from every other sample, with same-class
    denominators damped to 1/(alpha tau). The anchor itself is the only
    excluded denominator term. Samples are normalised against their own
    class centre before similarities are taken. Returns the mean anchor
    loss and its gradient w.r.t. the raw embeddings, computed with
    max-subtracted log-sum-exp.
    """
    z = batch.embeddings
    dtype = z.dtype
    b = z.shape[0]
    sib = batch.sibling_indices()
    cls = batch.class_indices

    diff = z.astype(np.float64) - centres.centres[cls].astype(np.float64)
    norms = np.linalg.norm(diff, axis=1)
    if np.any(norms <= NORM_EPS):
        bad = int(np.argmin(norms))
        raise DegenerateEmbeddingError(f"sample {bad} coincides with its class centre")
    unit = diff / norms[:, None]

    sims = unit @ unit.T
    inv_t = schedule.pair_matrix(cls)
    scaled = inv_t * sims
    np.fill_diagonal(scaled, -np.inf)

    row_max = scaled.max(axis=1, keepdims=True)
    log_z = row_max[:, 0] + np.log(np.sum(np.exp(scaled - row_max), axis=1))
    loss_per_anchor = -sims[np.arange(b), sib] / schedule.tau + log_z
    loss = float(loss_per_anchor.mean())

    # d loss / d sims, assembled per anchor row then symmetrised since
    # sims[a, b] feeds both anchor a and anchor b.
    soft = np.exp(scaled - log_z[:, None])
    np.fill_diagonal(soft, 0.0)
    grad_sims = inv_t * soft
    grad_sims[np.arange(b), sib] -= 1.0 / schedule.tau
    grad_unit = (grad_sims + grad_sims.T) @ unit / b

    # Through the per-sample normalisation: (I - u u^T) / ||z - c||.
    radial = np.sum(grad_unit * unit, axis=1, keepdims=True)
    grad_z = (grad_unit - unit * radial) / norms[:, None]
    return loss, grad_z.astype(dtype)


def _one_hot_cross_entropy(probs: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    global CLAMP_WARNINGS
    probs = np.asarray(probs)
    targets = np.asarray(targets, dtype=np.int64)
    b, k = probs.shape
    row_sums = probs.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-5):
        raise NumericError("head outputs are not probability rows")
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= k:
        raise ConfigError(f"target class outside [0, {k})")
    p_true = probs[np.arange(b), targets]
    clamped = np.maximum(p_true, PROB_CLAMP)
    n_clamped = int(np.sum(p_true < PROB_CLAMP))
    if n_clamped:
        CLAMP_WARNINGS += n_clamped
    loss = float(np.mean(-np.log(clamped)))
    grad = np.zeros_like(probs)
    grad[np.arange(b), targets] = -1.0 / (b * clamped)
    return loss, grad


def aug_classification_loss(head_probs: np.ndarray, class_indices: np.ndarray) -> tuple[float, np.ndarray]:
    """Cross-entropy of the augmentation-class head against the true class."""
    return _one_hot_cross_entropy(head_probs, class_indices)


def position_loss(pair_probs: np.ndarray, true_positions: np.ndarray) -> tuple[float, np.ndarray]:
    """Cross-entropy of the 8-way relative patch position head."""
    if pair_probs.shape[1] != 8:
        raise ConfigError(f"position head must emit 8 probabilities, got {pair_probs.shape[1]}")
    return _one_hot_cross_entropy(pair_probs, true_positions)


@dataclass
class LossSwitches:
    """Ablation switches; weights exist for ablation sweeps and default to
    the plain unweighted sum."""

    use_centring: bool = True
    use_contrastive: bool = True
    use_aug_class: bool = True
    use_position: bool = True
    weights: dict = field(default_factory=dict)

    def enabled(self, name: str) -> bool:
        return {
            "centring": self.use_centring,
            "contrastive": self.use_contrastive,
            "aug_class": self.use_aug_class,
            "position": self.use_position,
        }[name]

    def weight(self, name: str) -> float:
        return float(self.weights.get(name, 1.0))


def total_loss(
    parts: dict[str, tuple[float, dict[str, np.ndarray]]],
    switches: LossSwitches,
) -> tuple[float, dict[str, np.ndarray]]:
    """Sum the enabled loss terms and merge their gradients per target.

    ``parts`` maps a term name to (value, {target_name: gradient}); the
    result accumulates weighted gradients for each distinct target.
    """
    total = 0.0
    grads: dict[str, np.ndarray] = {}
    for name, (value, part_grads) in parts.items():
        if not switches.enabled(name):
            continue
        w = switches.weight(name)
        total += w * value
        for target, g in part_grads.items():
            if target in grads:
                grads[target] = grads[target] + w * g
            else:
                grads[target] = w * g if w != 1.0 else g.copy()
    return total, grads
