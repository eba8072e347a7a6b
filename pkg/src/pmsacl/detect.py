"""Downstream anomaly detectors on top of the pre-trained encoder:
position-wise Gaussian patch statistics scored by Mahalanobis distance, and
a light auto-encoder detector combining MAE + multi-scale structural
similarity reconstruction error with a Gaussian latent head.

The multi-scale SSIM here carries a hand-derived reverse-mode gradient
(validated against finite differences) because the reconstruction loss
trains the decoder through it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .containers import CHECKPOINT_MAGIC, PATCH_MODEL_MAGIC, read_container, write_container
from .errors import ConfigError, NumericError
from .imgops import upsample_bilinear_map, upsample_nearest
from .network import (
    Checkpoint,
    DecoderNet,
    EncoderCfg,
    EncoderNet,
    SgdMomentum,
    ZERO_HASH,
    clip_gradients,
    encoder_from_checkpoint,
)
from .numerics import RngStream

log = logging.getLogger(__name__)

SIGMA2_FLOOR = 1e-8
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


# ---------------------------------------------------------------------------
# Patch features
# ---------------------------------------------------------------------------


@dataclass
class PatchGrid:
    """Per-position concatenated multi-layer features on the patch lattice."""

    features: np.ndarray  # (Hg, Wg, d)
    image_hw: tuple[int, int]

    @property
    def grid_hw(self) -> tuple[int, int]:
        return self.features.shape[0], self.features.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[2]


def _align_and_concat(maps: list[np.ndarray]) -> np.ndarray:
    """Nearest-upsample coarser maps onto the finest grid and concatenate
    channels; maps are (B, h, w, c)."""
    target_h = max(m.shape[1] for m in maps)
    target_w = max(m.shape[2] for m in maps)
    aligned = []
    for m in maps:
        fh, rh = divmod(target_h, m.shape[1])
        fw, rw = divmod(target_w, m.shape[2])
        if rh or rw or fh != fw:
            raise ConfigError(
                f"feature map {m.shape[1:3]} does not align with grid ({target_h}, {target_w}) by an integer stride"
            )
        aligned.append(m if fh == 1 else np.stack([upsample_nearest(x, fh) for x in m]))
    return np.concatenate(aligned, axis=3)


def extract_patch_features(
    encoder: EncoderNet,
    images: np.ndarray,
    map_indices: tuple[int, ...] = (-2, -1),
) -> list[PatchGrid]:
    """Concatenated intermediate features for a batch of images.

    The selected encoder blocks are aligned on the finest of their spatial
    grids, so every position carries one feature vector of fixed dimension.
    """
    if images.ndim == 3:
        images = images[None]
    grids: list[PatchGrid] = []
    for start in range(0, len(images), 64):
        chunk = images[start : start + 64]
        encoder.forward(chunk)
        maps = [encoder.feature_maps[i] for i in map_indices]
        feats = _align_and_concat(maps)
        encoder.release_caches()
        for b in range(feats.shape[0]):
            grids.append(PatchGrid(feats[b], (chunk.shape[1], chunk.shape[2])))
    return grids


# ---------------------------------------------------------------------------
# PaDiM-style Gaussian patch model
# ---------------------------------------------------------------------------


@dataclass
class GaussianPatchModel:
    """Per-position mean and regularised-covariance Cholesky factors.

    Features are standardised by one global scale (their typical standard
    deviation over the training set) before the Gaussian fit, so the
    inherited eps keeps meaning "a hundredth of typical variance" whatever
    the encoder's output scale is.
    """

    mean: np.ndarray  # (P, d), in standardised units
    chol: np.ndarray  # (P, d, d) lower factors of (cov + eps I)
    eps: float
    feature_scale: float
    grid_hw: tuple[int, int]
    image_hw: tuple[int, int]
    subset: np.ndarray | None = None  # channel indices into the raw feature dim
    config_hash: bytes = ZERO_HASH
    chol_inv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        eye = np.eye(self.chol.shape[1])
        self.chol_inv = np.stack(
            [scipy.linalg.solve_triangular(L, eye, lower=True) for L in self.chol]
        )


@dataclass
class AnomalyScoreMap:
    position_scores: np.ndarray  # (Hg, Wg)
    pixel_scores: np.ndarray  # (H, W)
    image_score: float


def padim_fit(
    grids: list[PatchGrid],
    eps: float = 0.01,
    subset_size: int = 0,
    rng: RngStream | None = None,
    config_hash: bytes = ZERO_HASH,
) -> GaussianPatchModel:
    """Fit the position-wise Gaussian over training patch features.

    Uses the unbiased sample covariance plus ``eps`` on the diagonal; an
    optional random channel subset (drawn once) trims the feature dimension.
    """
    if len(grids) < 2:
        raise NumericError(f"need at least 2 training images, got {len(grids)}")
    feats = np.stack([g.features for g in grids]).astype(np.float64)
    n, hg, wg, d = feats.shape
    subset = None
    if subset_size and subset_size < d:
        if rng is None:
            raise ConfigError("channel subsetting needs an rng")
        subset = np.sort(np.argsort(rng.uniform(d))[:subset_size])
        feats = feats[..., subset]
        d = subset_size
    x = feats.reshape(n, hg * wg, d)
    scale = float(np.std(x - x.mean(axis=0)))
    if scale < 1e-12:
        scale = 1.0
    x = x / scale
    mean = x.mean(axis=0)
    centred = x - mean
    cov = np.einsum("npi,npj->pij", centred, centred) / (n - 1)
    cov += eps * np.eye(d)
    chol = np.linalg.cholesky(cov)
    return GaussianPatchModel(
        mean=mean, chol=chol, eps=eps, feature_scale=scale, grid_hw=(hg, wg),
        image_hw=grids[0].image_hw, subset=subset, config_hash=config_hash,
    )


def _mahalanobis_maps(model: GaussianPatchModel, feats: np.ndarray) -> np.ndarray:
    """(B, P, d) features -> (B, P) Mahalanobis distances via the stored factor."""
    diff = feats - model.mean
    white = np.einsum("pij,bpj->bpi", model.chol_inv, diff)
    return np.sqrt(np.maximum(np.einsum("bpi,bpi->bp", white, white), 0.0))


def padim_score(model: GaussianPatchModel, grid: PatchGrid) -> AnomalyScoreMap:
    """Mahalanobis score map for one image plus its max-pooled image score."""
    return padim_score_batch(model, [grid])[0]


def padim_score_batch(model: GaussianPatchModel, grids: list[PatchGrid]) -> list[AnomalyScoreMap]:
    hg, wg = model.grid_hw
    feats = np.stack([g.features for g in grids]).astype(np.float64)
    if feats.shape[1:3] != (hg, wg):
        raise ConfigError(f"grid {feats.shape[1:3]} does not match model grid {(hg, wg)}")
    if model.subset is not None:
        feats = feats[..., model.subset]
    if feats.shape[3] != model.mean.shape[1]:
        raise ConfigError(f"feature dim {feats.shape[3]} does not match model dim {model.mean.shape[1]}")
    dists = _mahalanobis_maps(model, feats.reshape(len(grids), hg * wg, -1) / model.feature_scale)
    out = []
    for b, g in enumerate(grids):
        pos = dists[b].reshape(hg, wg)
        pixel = upsample_bilinear_map(pos, g.image_hw[0], g.image_hw[1])
        out.append(AnomalyScoreMap(pos, pixel, float(pos.max())))
    return out


def save_patch_model(path, model: GaussianPatchModel) -> None:
    records = {
        "mean": model.mean,
        "chol": model.chol,
        "eps": np.array([model.eps]),
        "feature_scale": np.array([model.feature_scale]),
    }
    if model.subset is not None:
        records["subset"] = model.subset.astype(np.float64)
    trailer = {"grid_hw": list(model.grid_hw), "image_hw": list(model.image_hw)}
    write_container(path, PATCH_MODEL_MAGIC, model.config_hash, records, trailer)


def load_patch_model(path) -> GaussianPatchModel:
    config_hash, records, trailer = read_container(path, PATCH_MODEL_MAGIC)
    subset = records.get("subset")
    return GaussianPatchModel(
        mean=records["mean"],
        chol=records["chol"],
        eps=float(records["eps"][0]),
        feature_scale=float(records["feature_scale"][0]),
        grid_hw=tuple(trailer["grid_hw"]),
        image_hw=tuple(trailer["image_hw"]),
        subset=None if subset is None else subset.astype(np.int64),
        config_hash=config_hash,
    )


# ---------------------------------------------------------------------------
# Multi-scale SSIM with reverse-mode gradient
# ---------------------------------------------------------------------------


def _gauss_kernel(window: int, sigma: float) -> np.ndarray:
    xs = np.arange(window, dtype=np.float64) - (window - 1) / 2.0
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def _corr1d_valid(x: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(x, k.size, axis=axis)
    return win @ k


def _corr_valid(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    return _corr1d_valid(_corr1d_valid(x, k, 1), k, 2)


def _corr_full(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    p = k.size - 1
    padded = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    return _corr_valid(padded, k)


def _avgpool2(x: np.ndarray) -> np.ndarray:
    b, h, w, c = x.shape
    x = x[:, : 2 * (h // 2), : 2 * (w // 2), :]
    return x.reshape(b, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))


def _avgpool2_adjoint(g: np.ndarray, h: int, w: int) -> np.ndarray:
    b, hh, ww, c = g.shape
    out = np.zeros((b, h, w, c), dtype=g.dtype)
    spread = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) / 4.0
    out[:, : 2 * hh, : 2 * ww, :] = spread
    return out


def _ssim_scale(a: np.ndarray, b: np.ndarray, k: np.ndarray, c1: float, c2: float):
    mu_a = _corr_valid(a, k)
    mu_b = _corr_valid(b, k)
    xa = _corr_valid(a * a, k)
    xb = _corr_valid(b * b, k)
    xab = _corr_valid(a * b, k)
    va = xa - mu_a**2
    vb = xb - mu_b**2
    vab = xab - mu_a * mu_b
    lum = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    cs = (2 * vab + c2) / (va + vb + c2)
    return lum, cs, (mu_a, mu_b, va, vb, vab)


def _ssim_scale_backward(a, b, k, c1, c2, inter, u_lum, u_cs):
    """Gradient of sum(u_lum * lum + u_cs * cs) w.r.t. ``b``."""
    mu_a, mu_b, va, vb, vab = inter
    denom_l = mu_a**2 + mu_b**2 + c1
    dl_dmu_b = (2 * mu_a * denom_l - (2 * mu_a * mu_b + c1) * 2 * mu_b) / denom_l**2
    denom_cs = va + vb + c2
    dcs_dvab = 2.0 / denom_cs
    cs = (2 * vab + c2) / denom_cs
    dcs_dvb = -cs / denom_cs
    g_mu_b = u_lum * dl_dmu_b + u_cs * (dcs_dvab * (-mu_a) + dcs_dvb * (-2 * mu_b))
    g_xab = u_cs * dcs_dvab
    g_xb = u_cs * dcs_dvb
    return _corr_full(g_mu_b, k) + a * _corr_full(g_xab, k) + 2 * b * _corr_full(g_xb, k)


def msssim_batch(
    x: np.ndarray,
    y: np.ndarray,
    scales: int = 3,
    window: int = 11,
    sigma: float = 1.5,
    want_grad: bool = False,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Multi-scale SSIM per batch item, optionally with d(value)/dy.

    Standard per-scale exponents renormalised to ``scales``; contrast terms
    are clipped at zero (a non-positive term zeroes the product and its
    gradient). Images are (B, H, W, C) in [0, 1].
    """
    if x.shape != y.shape:
        raise ConfigError(f"shape mismatch {x.shape} vs {y.shape}")
    if scales < 1 or scales > len(MSSSIM_WEIGHTS):
        raise ConfigError(f"scale count must be in [1, {len(MSSSIM_WEIGHTS)}]")
    min_side = min(x.shape[1], x.shape[2])
    if min_side // (2 ** (scales - 1)) < window:
        raise ConfigError(
            f"image side {min_side} too small for {scales} scales with window {window}"
        )
    weights = np.array(MSSSIM_WEIGHTS[:scales])
    weights = weights / weights.sum()
    k = _gauss_kernel(window, sigma)
    c1, c2 = 0.01**2, 0.03**2

    a = x.astype(np.float64)
    b = y.astype(np.float64)
    batch = x.shape[0]
    levels = []  # per scale: (a, b, inter or None, term values, map pixel count)
    terms = np.empty((scales, batch))
    for s in range(scales):
        lum, cs, inter = _ssim_scale(a, b, k, c1, c2)
        per_map = lum * cs if s == scales - 1 else cs
        terms[s] = per_map.mean(axis=(1, 2, 3))
        levels.append((a, b, inter, lum, cs))
        if s < scales - 1:
            a, b = _avgpool2(a), _avgpool2(b)

    clipped = np.maximum(terms, 0.0)
    values = np.prod(clipped ** weights[:, None], axis=0)
    if not want_grad:
        return values, None

    # d value / d term_s = value * w_s / term_s (zero wherever a term died).
    alive = np.all(terms > 0.0, axis=0)
    grad = np.zeros_like(b, dtype=np.float64)
    carried = None
    for s in reversed(range(scales)):
        a_s, b_s, inter, lum, cs = levels[s]
        n_map = lum[0].size
        dval_dterm = np.where(alive & (terms[s] > 0), values * weights[s] / np.maximum(terms[s], 1e-300), 0.0)
        u = (dval_dterm / n_map)[:, None, None, None]
        if s == scales - 1:
            u_lum, u_cs = u * cs, u * lum
        else:
            u_lum, u_cs = np.zeros_like(lum), np.broadcast_to(u, lum.shape)
        db = _ssim_scale_backward(a_s, b_s, k, c1, c2, inter, u_lum, u_cs)
        if carried is not None:
            db = db + _avgpool2_adjoint(carried, b_s.shape[1], b_s.shape[2])
        carried = db
    return values, carried


def msssim(x: np.ndarray, y: np.ndarray, scales: int = 3, window: int = 11, sigma: float = 1.5) -> float:
    """MS-SSIM similarity of one image pair, in [0, 1]."""
    values, _ = msssim_batch(x[None], y[None], scales, window, sigma)
    return float(values[0])


# ---------------------------------------------------------------------------
# Reconstruction loss (MAE + blended global/local MS-SSIM)
# ---------------------------------------------------------------------------


def reconstruction_loss(
    x: np.ndarray,
    x_recon: np.ndarray,
    patches: np.ndarray | None,
    patch_recons: np.ndarray | None,
    rho: float = 0.5,
    nu: float = 0.5,
    scales_global: int = 3,
    scales_local: int = 2,
    want_grad: bool = False,
):
    """rho * MAE + (1 - rho) * (1 - (nu * global + (1 - nu) * local MS-SSIM)).

    ``x``/``x_recon`` are image batches; ``patches``/``patch_recons`` feed
    the local similarity (mean over all patches) and may be None, in which
    case the blend collapses onto the global score. Returns the scalar and,
    when asked, gradients w.r.t. both reconstructions.
    """
    batch = x.shape[0]
    mae = float(np.mean(np.abs(x.astype(np.float64) - x_recon.astype(np.float64))))
    m_global, dmg = msssim_batch(x, x_recon, scales_global, want_grad=want_grad)
    blend = nu * float(m_global.mean())
    local_weight = 1.0 - nu
    if patches is not None:
        m_local, dml = msssim_batch(patches, patch_recons, scales_local, want_grad=want_grad)
        blend += local_weight * float(m_local.mean())
    else:
        blend += local_weight * float(m_global.mean())
    value = rho * mae + (1.0 - rho) * (1.0 - blend)
    if not want_grad:
        return value, None, None
    n_px = x[0].size
    d_recon = rho * np.sign(x_recon.astype(np.float64) - x.astype(np.float64)) / (batch * n_px)
    gw = nu if patches is not None else 1.0
    d_recon += (1.0 - rho) * (-gw / batch) * dmg
    d_patches = None
    if patches is not None:
        d_patches = (1.0 - rho) * (-(1.0 - nu) / patches.shape[0]) * dml
    return value, d_recon, d_patches


# ---------------------------------------------------------------------------
# IGD-lite
# ---------------------------------------------------------------------------


@dataclass
class IGDPathway:
    encoder: EncoderNet
    decoder: DecoderNet
    mu: np.ndarray
    sigma2: float

    def reconstruct(self, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        z = self.encoder.forward(images)
        out = self.decoder.forward(z)
        self.encoder.release_caches()
        for _, layer in self.decoder.stack.named_layers:
            layer._cache = None
        return z, out

    def gaussian_score(self, z: np.ndarray) -> np.ndarray:
        d2 = np.sum((z.astype(np.float64) - self.mu) ** 2, axis=1)
        return 1.0 - np.exp(-d2 / self.sigma2)


@dataclass
class IGDLite:
    global_path: IGDPathway
    local_path: IGDPathway
    xi: float = 0.5
    rho: float = 0.5
    nu: float = 0.5
    kappa_reg: float = 0.25
    scales_global: int = 3
    scales_local: int = 2
    patch_side: int = 32
    literal_score_direction: bool = False
    config_hash: bytes = ZERO_HASH
    trained: bool = False
    curves: dict = field(default_factory=dict)


@dataclass
class IGDTrainCfg:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    grad_clip: float = 5.0
    xi: float = 0.5
    rho: float = 0.5
    nu: float = 0.5
    kappa_reg: float = 0.25
    scales_global: int = 3
    scales_local: int = 2
    patch_side: int = 32
    literal_score_direction: bool = False


def _estimate_gaussian_head(encoder: EncoderNet, images: np.ndarray, kappa_reg: float) -> tuple[np.ndarray, float]:
    z = encoder.encode(images).astype(np.float64)
    mu = z.mean(axis=0)
    sigma2 = float(kappa_reg * np.mean(np.sum((z - mu) ** 2, axis=1)))
    if sigma2 < SIGMA2_FLOOR:
        log.warning("latent variance %.3g under floor, clamping to %.3g", sigma2, SIGMA2_FLOOR)
        sigma2 = SIGMA2_FLOOR
    return mu, sigma2


def _random_patches(images: np.ndarray, side: int, rng: RngStream) -> np.ndarray:
    h, w = images.shape[1], images.shape[2]
    out = np.empty((len(images), side, side, images.shape[3]), dtype=images.dtype)
    for i, img in enumerate(images):
        r = int(rng.integers(0, h - side + 1))
        c = int(rng.integers(0, w - side + 1))
        out[i] = img[r : r + side, c : c + side]
    return out


def igd_fit(
    ckpt: Checkpoint,
    dataset: list[tuple[str, np.ndarray]],
    cfg: IGDTrainCfg,
    rng: RngStream,
    config_hash: bytes = ZERO_HASH,
) -> IGDLite:
    """Train the auto-encoder detector from a pre-trained encoder checkpoint.

    Fine-tunes a global pathway on whole images and a local pathway on
    random patches, jointly minimising the blended reconstruction loss plus
    the Gaussian latent term of each pathway. Head statistics are
    re-estimated each epoch and finalised over the full training set.
    """
    if not dataset:
        raise ConfigError("igd_fit needs a non-empty dataset")
    images = np.stack([img for _, img in dataset]).astype(np.float32)
    image_hw = images.shape[1]
    g_enc = encoder_from_checkpoint(ckpt)
    l_enc = encoder_from_checkpoint(ckpt)
    enc_cfg = _encoder_cfg_from_trailer(ckpt.trailer)
    g_dec = DecoderNet(enc_cfg, image_hw, rng.child("gdec"))
    l_dec = DecoderNet(enc_cfg, cfg.patch_side, rng.child("ldec"))
    optimizer = SgdMomentum(cfg.lr, cfg.momentum)
    curves: dict[str, list[float]] = {"rec": [], "latent": []}

    for epoch in range(cfg.epochs):
        mu_g, s2_g = _estimate_gaussian_head(g_enc, images, cfg.kappa_reg)
        patches_all = _random_patches(images, cfg.patch_side, rng.child("patch", epoch))
        mu_l, s2_l = _estimate_gaussian_head(l_enc, patches_all, cfg.kappa_reg)
        order = np.argsort(rng.child("shuffle", epoch).uniform(len(images)), kind="stable")
        rec_sum, lat_sum, n_batches = 0.0, 0.0, 0
        for start in range(0, len(images), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = images[idx]
            pb = patches_all[idx]
            for net in (g_enc, l_enc):
                net.zero_grads()
            g_dec.zero_grads()
            l_dec.zero_grads()

            z_g = g_enc.forward(xb)
            xh = g_dec.forward(z_g)
            z_l = l_enc.forward(pb)
            ph = l_dec.forward(z_l)
            rec, d_xh, d_ph = reconstruction_loss(
                xb, xh, pb, ph, cfg.rho, cfg.nu, cfg.scales_global, cfg.scales_local, want_grad=True,
            )
            lat_g = float(np.mean(1.0 - np.exp(-np.sum((z_g.astype(np.float64) - mu_g) ** 2, axis=1) / s2_g)))
            lat_l = float(np.mean(1.0 - np.exp(-np.sum((z_l.astype(np.float64) - mu_l) ** 2, axis=1) / s2_l)))
            loss = rec + lat_g + lat_l
            if not np.isfinite(loss):
                raise NumericError(f"non-finite detector loss at epoch {epoch}: rec={rec}, latent={lat_g + lat_l}")

            dz_g = g_dec.backward(d_xh.astype(np.float32))
            dz_g += _gaussian_head_grad(z_g, mu_g, s2_g)
            g_enc.backward(dz_g)
            dz_l = l_dec.backward(d_ph.astype(np.float32))
            dz_l += _gaussian_head_grad(z_l, mu_l, s2_l)
            l_enc.backward(dz_l)

            params = {
                **g_enc.parameters(), **_prefixed(g_dec, "gdec."),
                **{f"local.{k}": v for k, v in l_enc.parameters().items()}, **_prefixed(l_dec, "ldec."),
            }
            grads = {
                **g_enc.gradients(), **_prefixed_grads(g_dec, "gdec."),
                **{f"local.{k}": v for k, v in l_enc.gradients().items()}, **_prefixed_grads(l_dec, "ldec."),
            }
            clip_gradients(grads, cfg.grad_clip)
            optimizer.step(params, grads)
            rec_sum += rec
            lat_sum += lat_g + lat_l
            n_batches += 1
        curves["rec"].append(rec_sum / n_batches)
        curves["latent"].append(lat_sum / n_batches)

    mu_g, s2_g = _estimate_gaussian_head(g_enc, images, cfg.kappa_reg)
    final_patches = _random_patches(images, cfg.patch_side, rng.child("patch", "final"))
    mu_l, s2_l = _estimate_gaussian_head(l_enc, final_patches, cfg.kappa_reg)
    return IGDLite(
        global_path=IGDPathway(g_enc, g_dec, mu_g, s2_g),
        local_path=IGDPathway(l_enc, l_dec, mu_l, s2_l),
        xi=cfg.xi, rho=cfg.rho, nu=cfg.nu, kappa_reg=cfg.kappa_reg,
        scales_global=cfg.scales_global, scales_local=cfg.scales_local,
        patch_side=cfg.patch_side, literal_score_direction=cfg.literal_score_direction,
        config_hash=config_hash, trained=True, curves=curves,
    )


def _gaussian_head_grad(z: np.ndarray, mu: np.ndarray, sigma2: float) -> np.ndarray:
    d2 = np.sum((z.astype(np.float64) - mu) ** 2, axis=1, keepdims=True)
    grad = np.exp(-d2 / sigma2) * 2.0 * (z.astype(np.float64) - mu) / (sigma2 * z.shape[0])
    return grad.astype(z.dtype)


def _prefixed(dec: DecoderNet, prefix: str) -> dict[str, np.ndarray]:
    return dec.parameters(prefix)


def _prefixed_grads(dec: DecoderNet, prefix: str) -> dict[str, np.ndarray]:
    return dec.gradients(prefix)


def _encoder_cfg_from_trailer(trailer: dict) -> EncoderCfg:
    cfg = trailer.get("encoder_cfg")
    if not cfg:
        raise ConfigError("checkpoint trailer lacks encoder_cfg")
    return EncoderCfg(
        in_channels=int(cfg["in_channels"]),
        channels=tuple(int(c) for c in cfg["channels"]),
        embed_dim=int(cfg["embed_dim"]),
        leaky_slope=float(cfg["leaky_slope"]),
    )


def _minmax(arr: np.ndarray) -> np.ndarray:
    lo, hi = float(arr.min()), float(arr.max())
    if hi - lo < 1e-12:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


def igd_score(model: IGDLite, image: np.ndarray) -> tuple[float, AnomalyScoreMap]:
    """Blended reconstruction + latent anomaly score for one image.

    The pixel map sums the min-max normalised global residual with the
    nearest-upsampled per-patch scores of the local pathway.
    """
    if not model.trained:
        raise NumericError("scoring with an untrained detector")
    x = image[None].astype(np.float32)
    z_g, xh = model.global_path.reconstruct(x)
    mae = float(np.mean(np.abs(x.astype(np.float64) - xh.astype(np.float64))))
    m_global = msssim(x[0], xh[0], model.scales_global)

    h, w = image.shape[:2]
    side = model.patch_side
    if h % side or w % side:
        raise ConfigError(f"image {h}x{w} not tileable by {side}-pixel patches")
    rows, cols = h // side, w // side
    tiles = np.stack([
        image[r * side : (r + 1) * side, c * side : (c + 1) * side]
        for r in range(rows) for c in range(cols)
    ]).astype(np.float32)
    z_l, th = model.local_path.reconstruct(tiles)
    m_tiles, _ = msssim_batch(tiles, th, model.scales_local)
    mae_tiles = np.mean(np.abs(tiles.astype(np.float64) - th.astype(np.float64)), axis=(1, 2, 3))
    m_local = float(m_tiles.mean())

    rec = model.rho * mae + (1.0 - model.rho) * (
        1.0 - (model.nu * m_global + (1.0 - model.nu) * m_local)
    )
    h_global = float(model.global_path.gaussian_score(z_g)[0])
    anomaly_term = (1.0 - h_global) if model.literal_score_direction else h_global
    score = model.xi * rec + (1.0 - model.xi) * anomaly_term

    h_tiles = model.local_path.gaussian_score(z_l)
    tile_term = (1.0 - h_tiles) if model.literal_score_direction else h_tiles
    tile_rec = model.rho * mae_tiles + (1.0 - model.rho) * (1.0 - m_tiles)
    tile_scores = (model.xi * tile_rec + (1.0 - model.xi) * tile_term).reshape(rows, cols)

    residual = np.abs(x[0].astype(np.float64) - xh[0].astype(np.float64)).mean(axis=2)
    local_up = upsample_nearest(tile_scores, side)
    pixel = _minmax(residual) + _minmax(local_up)
    return score, AnomalyScoreMap(tile_scores, pixel, score)


def save_igd(path, model: IGDLite) -> None:
    records = {}
    records.update(model.global_path.encoder.parameters())
    records.update(model.global_path.decoder.parameters("gdec."))
    records.update({f"local.{k}": v for k, v in model.local_path.encoder.parameters().items()})
    records.update(model.local_path.decoder.parameters("ldec."))
    records["head.mu_global"] = model.global_path.mu
    records["head.mu_local"] = model.local_path.mu
    trailer = {
        "sigma2_global": model.global_path.sigma2,
        "sigma2_local": model.local_path.sigma2,
        "xi": model.xi, "rho": model.rho, "nu": model.nu, "kappa_reg": model.kappa_reg,
        "scales_global": model.scales_global, "scales_local": model.scales_local,
        "patch_side": model.patch_side,
        "literal_score_direction": model.literal_score_direction,
        "image_hw": model.global_path.decoder.out_hw,
        "encoder_cfg": {
            "in_channels": model.global_path.encoder.cfg.in_channels,
            "channels": list(model.global_path.encoder.cfg.channels),
            "embed_dim": model.global_path.encoder.cfg.embed_dim,
            "leaky_slope": model.global_path.encoder.cfg.leaky_slope,
        },
        "curves": model.curves,
        "kind": "igd",
    }
    write_container(path, CHECKPOINT_MAGIC, model.config_hash, records, trailer)


def load_igd(path) -> IGDLite:
    config_hash, records, trailer = read_container(path, CHECKPOINT_MAGIC)
    if trailer.get("kind") != "igd":
        raise ConfigError(f"{path}: not a detector checkpoint (kind={trailer.get('kind')!r})")
    enc_cfg = _encoder_cfg_from_trailer(trailer)
    g_enc = EncoderNet(enc_cfg, RngStream(0, "loader"))
    g_enc.load_parameters(records)
    l_enc = EncoderNet(enc_cfg, RngStream(0, "loader"))
    l_enc.load_parameters({k[len("local."):]: v for k, v in records.items() if k.startswith("local.encoder")})
    g_dec = DecoderNet(enc_cfg, int(trailer["image_hw"]), RngStream(0, "loader"))
    g_dec.load_parameters(records, "gdec.")
    l_dec = DecoderNet(enc_cfg, int(trailer["patch_side"]), RngStream(0, "loader"))
    l_dec.load_parameters(records, "ldec.")
    return IGDLite(
        global_path=IGDPathway(g_enc, g_dec, records["head.mu_global"], float(trailer["sigma2_global"])),
        local_path=IGDPathway(l_enc, l_dec, records["head.mu_local"], float(trailer["sigma2_local"])),
        xi=float(trailer["xi"]), rho=float(trailer["rho"]), nu=float(trailer["nu"]),
        kappa_reg=float(trailer["kappa_reg"]),
        scales_global=int(trailer["scales_global"]), scales_local=int(trailer["scales_local"]),
        patch_side=int(trailer["patch_side"]),
        literal_score_direction=bool(trailer["literal_score_direction"]),
        config_hash=config_hash, trained=True,
        curves=trailer.get("curves", {}),
    )
