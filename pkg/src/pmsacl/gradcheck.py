"""Finite-difference verification suite for every analytic gradient: the
four loss terms, their composed sum through the real heads, the blended
reconstruction loss, and the full network parameter gradients on a tiny
input.

Float64 checks run against tolerance 1e-6, float32 against 1e-4. The
relative-error denominator is floored (1e-4 in f64, 1e-2 in f32), which
amounts to an absolute tolerance of floor * rtol for near-zero
coordinates; central differences carry ~1e-11 of roundoff at step 1e-5, so
anything beyond that is a genuine gradient defect.
"""

from __future__ import annotations

import numpy as np

from .detect import reconstruction_loss
from .losses import (
    ClassCentres,
    EmbeddingBatch,
    LossSwitches,
    TemperatureSchedule,
    aug_classification_loss,
    centring_loss,
    pmsacl_loss,
    position_loss,
)
from .medmix import AugmentedSample
from .network import EncoderCfg, EncoderNet, HeadNets, batch_losses, make_position_pairs
from .numerics import RngStream, finite_diff_grad, max_relative_error

TOLERANCES = {"f64": 1e-6, "f32": 1e-4}
FLOORS = {"f64": 1e-4, "f32": 1e-2}
FD_STEP = 1e-5
PROB_FD_STEP = 1e-6  # keeps perturbed rows within the probability-sum tolerance


def stable_central_diff(evaluate, flat: np.ndarray, idx: int, h0: float = 2e-5,
                        levels: int = 5) -> float:
    """Central difference that halves the step until successive estimates
    agree, so a leaky-ReLU kink or an absolute-value crossing inside the
    initial interval cannot poison the oracle. Piecewise-smooth losses
    converge once the step drops below the distance to the kink."""
    orig = flat[idx]
    estimates = []
    h = h0
    for _ in range(levels):
        flat[idx] = orig + h
        f_plus = evaluate()
        flat[idx] = orig - h
        f_minus = evaluate()
        flat[idx] = orig
        estimates.append((f_plus - f_minus) / (2.0 * h))
        if len(estimates) >= 2:
            cur, prev = estimates[-1], estimates[-2]
            if abs(cur - prev) <= max(1e-6 * abs(cur), 1e-8):
                return cur
        h /= 2.0
    return estimates[-1]


def _toy_batch(rng: RngStream, b: int = 8, z: int = 6, n_classes: int = 3):
    assert b % 2 == 0
    emb = rng.normal((b, z))
    classes = np.asarray(rng.integers(0, n_classes, b // 2)).repeat(2)
    views = np.tile([0, 1], b // 2)
    sids = [f"s{i}" for i in range(b // 2) for _ in range(2)]
    centres = ClassCentres(rng.normal((n_classes, z)))
    return EmbeddingBatch(emb, classes, views, sids), centres


def _embedding_fd_err(loss_fn, batch: EmbeddingBatch, precision: str) -> float:
    """Analytic gradient in the target precision vs float64 finite
    differences at the same (float64) point."""
    dtype = np.float64 if precision == "f64" else np.float32
    _, grad = loss_fn(batch.embeddings.astype(dtype))

    def at(z_flat):
        return loss_fn(z_flat.reshape(batch.embeddings.shape))[0]

    fd = finite_diff_grad(at, batch.embeddings.reshape(-1), FD_STEP)
    return max_relative_error(grad.reshape(-1), fd, FLOORS[precision])


def check_centring(rng: RngStream, precision: str) -> float:
    batch, centres = _toy_batch(rng)

    def fn(z):
        return centring_loss(
            EmbeddingBatch(z, batch.class_indices, batch.view_indices, batch.source_ids), centres
        )

    return _embedding_fd_err(fn, batch, precision)


def check_contrastive(rng: RngStream, precision: str) -> float:
    batch, centres = _toy_batch(rng)
    schedule = TemperatureSchedule(tau=0.3, alpha=2.0)

    def fn(z):
        return pmsacl_loss(
            EmbeddingBatch(z, batch.class_indices, batch.view_indices, batch.source_ids),
            centres, schedule,
        )

    return _embedding_fd_err(fn, batch, precision)


def _prob_rows(rng: RngStream, b: int, k: int, dtype) -> np.ndarray:
    logits = rng.normal((b, k))
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return (e / e.sum(axis=1, keepdims=True)).astype(dtype)


def check_cross_entropy(rng: RngStream, precision: str, head: str) -> float:
    dtype = np.float64 if precision == "f64" else np.float32
    k = 8 if head == "position" else 4
    probs = _prob_rows(rng, 6, k, np.float64)
    targets = np.asarray(rng.integers(0, k, 6))
    loss_fn = position_loss if head == "position" else aug_classification_loss
    _, grad = loss_fn(probs.astype(dtype), targets)

    def at(p_flat):
        return loss_fn(p_flat.reshape(probs.shape), targets)[0]

    fd = finite_diff_grad(at, probs.reshape(-1), PROB_FD_STEP)
    return max_relative_error(grad.reshape(-1), fd, FLOORS[precision])


def check_composed(rng: RngStream, precision: str) -> float:
    """Sum of all four terms as one function of the embeddings, with the
    pretext heads realised as fixed affine+softmax maps."""
    dtype = np.float64 if precision == "f64" else np.float32
    batch, centres = _toy_batch(rng, b=8, z=6)
    schedule = TemperatureSchedule(tau=0.3, alpha=1.7)
    w_aug64 = rng.normal((6, centres.n_classes))
    w_pos64 = rng.normal((12, 8))
    pos_targets = np.asarray(rng.integers(0, 8, 4))

    def softmax(x):
        e = np.exp(x - x.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def fn(z):
        w_aug = w_aug64.astype(z.dtype)
        w_pos = w_pos64.astype(z.dtype)
        eb = EmbeddingBatch(z, batch.class_indices, batch.view_indices, batch.source_ids)
        v1, g1 = centring_loss(eb, centres)
        v2, g2 = pmsacl_loss(eb, centres, schedule)
        p_aug = softmax(z @ w_aug)
        v3, dp_aug = aug_classification_loss(p_aug, batch.class_indices)
        pairs = z.reshape(4, 12)
        p_pos = softmax(pairs @ w_pos)
        v4, dp_pos = position_loss(p_pos, pos_targets)
        # softmax backward for both heads
        da = p_aug * (dp_aug - np.sum(dp_aug * p_aug, axis=1, keepdims=True))
        dpos = p_pos * (dp_pos - np.sum(dp_pos * p_pos, axis=1, keepdims=True))
        grad = g1 + g2 + da @ w_aug.T + (dpos @ w_pos.T).reshape(8, 6)
        return v1 + v2 + v3 + v4, grad

    _, grad = fn(batch.embeddings.astype(dtype))
    fd = finite_diff_grad(lambda v: fn(v.reshape(8, 6))[0],
                          batch.embeddings.reshape(-1), FD_STEP)
    return max_relative_error(grad.reshape(-1), fd, FLOORS[precision])


def check_reconstruction(rng: RngStream, precision: str, n_coords: int = 24) -> float:
    dtype = np.float64 if precision == "f64" else np.float32
    x = rng.uniform((1, 64, 64, 1))
    recon = np.clip(x + rng.normal(x.shape) * 0.08, 0.0, 1.0)
    patches = rng.uniform((2, 32, 32, 1))
    patch_recons = np.clip(patches + rng.normal(patches.shape) * 0.08, 0.0, 1.0)
    _, d_recon, d_patches = reconstruction_loss(
        x.astype(dtype), recon.astype(dtype), patches.astype(dtype), patch_recons.astype(dtype),
        rho=0.4, nu=0.6, want_grad=True,
    )

    worst = 0.0
    recon64 = recon.copy()
    patch64 = patch_recons.copy()
    for target, grad, base in (("global", d_recon, recon64), ("local", d_patches, patch64)):
        flat = base.reshape(-1)
        picks = np.asarray(rng.integers(0, flat.size, n_coords))

        def evaluate():
            args = (x, recon64, patches, patch64)
            return reconstruction_loss(*args, rho=0.4, nu=0.6)[0]

        for idx in picks:
            fd = stable_central_diff(evaluate, flat, int(idx))
            err = max_relative_error(np.array([grad.reshape(-1)[idx]]), np.array([fd]), FLOORS[precision])
            worst = max(worst, err)
    return worst


# The composed batch loss sits near 20, so central differences carry about
# eps*|f|/2h ~ 1e-10 of absolute roundoff; the floor keeps the implied
# absolute tolerance (floor * rtol = 1e-9) an order above that noise.
NETWORK_FLOORS = {"f64": 1e-3, "f32": 1e-2}


def check_network(rng: RngStream, precision: str, coords_per_tensor: int = 3) -> float:
    """Full forward/backward on an 8x8 input against FD through a float64
    twin sharing the same parameter values."""
    enc_cfg = EncoderCfg(channels=(4, 6), embed_dim=8)
    init = rng.child("init")
    net64 = EncoderNet(enc_cfg, init, dtype=np.float64)
    heads64 = HeadNets(8, 3, init.child("heads"), dtype=np.float64)
    sources = [(f"s{i}", rng.uniform((8, 8, 3))) for i in range(2)]
    images = [np.clip(img + rng.normal(img.shape) * 0.03, 0, 1) for _, img in sources for _ in range(2)]
    samples = [
        AugmentedSample(images[2 * i + l], int(rng.integers(0, 3)), l, np.zeros((8, 8), bool), sid)
        for i, (sid, _) in enumerate(sources) for l in (0, 1)
    ]
    pos_pairs = make_position_pairs(sources, rng.child("pos"))
    centres = ClassCentres(rng.normal((3, 8)))
    schedule = TemperatureSchedule(tau=0.4, alpha=2.0)
    switches = LossSwitches()

    if precision == "f64":
        net, heads = net64, heads64
        dtype = np.float64
    else:
        net = EncoderNet(enc_cfg, RngStream(0, "tmp"), dtype=np.float32)
        heads = HeadNets(8, 3, RngStream(0, "tmp"), dtype=np.float32)
        net.load_parameters({k: v for k, v in net64.parameters().items()})
        heads.load_parameters({k: v for k, v in heads64.parameters().items()})
        dtype = np.float32

    net.zero_grads()
    heads.zero_grads()
    batch_losses(net, heads, centres, schedule, switches, samples, pos_pairs,
                 dtype=dtype, want_grads=True)
    analytic = {**net.gradients(), **heads.gradients()}

    params64 = {**net64.parameters(), **heads64.parameters()}

    def loss_only() -> float:
        terms = batch_losses(net64, heads64, centres, schedule, switches, samples,
                             pos_pairs, dtype=np.float64, want_grads=False)
        return terms["total"]

    worst = 0.0
    for name, grad in analytic.items():
        target = params64[name]
        flat = target.reshape(-1)
        picks = np.asarray(rng.child("pick", name).integers(0, flat.size, min(coords_per_tensor, flat.size)))
        for idx in picks:
            fd = stable_central_diff(loss_only, flat, int(idx))
            err = max_relative_error(np.array([grad.reshape(-1)[idx]]), np.array([fd]), NETWORK_FLOORS[precision])
            worst = max(worst, err)
    return worst


def run_suite(seed: int = 0, points: int = 10) -> dict:
    """All checks at `points` random configurations per precision; returns
    {"f64": {...}, "f32": {...}, "passed": bool}."""
    results: dict = {}
    for precision in ("f64", "f32"):
        entry: dict[str, float] = {}
        for p in range(points):
            rng = RngStream(seed + p, f"gradcheck/{precision}")
            entry["centring"] = max(entry.get("centring", 0.0), check_centring(rng.child("ctr"), precision))
            entry["contrastive"] = max(entry.get("contrastive", 0.0), check_contrastive(rng.child("con"), precision))
            entry["aug_class"] = max(entry.get("aug_class", 0.0), check_cross_entropy(rng.child("aug"), precision, "aug"))
            entry["position"] = max(entry.get("position", 0.0), check_cross_entropy(rng.child("pos"), precision, "position"))
            entry["composed"] = max(entry.get("composed", 0.0), check_composed(rng.child("tot"), precision))
            entry["reconstruction"] = max(
                entry.get("reconstruction", 0.0), check_reconstruction(rng.child("rec"), precision, n_coords=8)
            )
            if p < 3:  # the network check is the slow one; three points suffice
                entry["network"] = max(entry.get("network", 0.0), check_network(rng.child("net"), precision))
        results[precision] = entry
    results["passed"] = all(
        err < TOLERANCES[precision]
        for precision in ("f64", "f32")
        for err in results[precision].values()
    )
    return results
