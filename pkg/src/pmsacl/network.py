"""Compact convolutional encoder with projection head, pretext heads, an
optional decoder, reverse-mode gradients and the SGD-momentum pre-training
loop.

Layers cache one forward pass and release it on backward; parameter
gradients accumulate until ``zero_grads``. Images are NHWC float arrays.
The 3-block backbone (stride-2 convs, channels 16/32/64, leaky ReLU, no
batch norm) keeps every sample's gradient independent and trains in minutes
on one core while exposing two spatially aligned feature maps for patch
statistics downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .containers import CHECKPOINT_MAGIC, read_container, write_container
from .errors import ConfigError, NumericError
from .losses import (
    ClassCentres,
    EmbeddingBatch,
    LossSwitches,
    TemperatureSchedule,
    aug_classification_loss,
    centring_loss,
    compute_centres,
    pmsacl_loss,
    position_loss,
    total_loss,
)
from .medmix import AugConfig, make_pretrain_batch
from .numerics import RngStream

ZERO_HASH = bytes(32)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class Layer:
    """Base layer: single-slot forward cache, accumulating parameter grads."""

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise NumericError(f"{type(self).__name__}.backward without a matching forward")
        cache, self._cache = self._cache, None
        return cache

    def zero_grads(self) -> None:
        for key, p in self.params.items():
            self.grads[key] = np.zeros_like(p)


def _fan_in_uniform(rng: RngStream, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    # sqrt(6/fan_in) keeps activation variance roughly constant through the
    # ReLU-family stack (no batch norm to re-scale between blocks)
    bound = np.sqrt(6.0 / fan_in)
    return ((rng.uniform(shape) * 2.0 - 1.0) * bound).astype(dtype)


class Conv2d(Layer):
    def __init__(self, c_in: int, c_out: int, rng: RngStream, kernel: int = 3,
                 stride: int = 1, pad: int = 1, dtype=np.float32) -> None:
        super().__init__()
        self.kernel, self.stride, self.pad = kernel, stride, pad
        self.c_in, self.c_out = c_in, c_out
        fan_in = kernel * kernel * c_in
        self.params["w"] = _fan_in_uniform(rng, (fan_in, c_out), fan_in, dtype)
        self.params["b"] = np.zeros(c_out, dtype=dtype)
        self.zero_grads()

    def _im2col(self, xp: np.ndarray, h_out: int, w_out: int) -> np.ndarray:
        b = xp.shape[0]
        k, s, c = self.kernel, self.stride, self.c_in
        sb, sh, sw, sc = xp.strides
        view = np.lib.stride_tricks.as_strided(
            xp,
            shape=(b, h_out, w_out, k, k, c),
            strides=(sb, sh * s, sw * s, sh, sw, sc),
            writeable=False,
        )
        return view.reshape(b * h_out * w_out, k * k * c)

    def forward(self, x: np.ndarray) -> np.ndarray:
        b, h, w, _ = x.shape
        p, k, s = self.pad, self.kernel, self.stride
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        h_out = (h + 2 * p - k) // s + 1
        w_out = (w + 2 * p - k) // s + 1
        col = np.ascontiguousarray(self._im2col(xp, h_out, w_out))
        out = col @ self.params["w"] + self.params["b"]
        self._cache = (col, x.shape, h_out, w_out)
        return out.reshape(b, h_out, w_out, self.c_out)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        col, x_shape, h_out, w_out = self._take_cache()
        b, h, w, c = x_shape
        p, k, s = self.pad, self.kernel, self.stride
        dflat = dout.reshape(-1, self.c_out)
        self.grads["w"] += col.T @ dflat
        self.grads["b"] += dflat.sum(axis=0)
        dcol = (dflat @ self.params["w"].T).reshape(b, h_out, w_out, k, k, c)
        dxp = np.zeros((b, h + 2 * p, w + 2 * p, c), dtype=dout.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i : i + s * h_out : s, j : j + s * w_out : s, :] += dcol[:, :, :, i, j, :]
        return dxp[:, p : p + h, p : p + w, :] if p else dxp


class LeakyReLU(Layer):
    def __init__(self, slope: float = 0.1) -> None:
        super().__init__()
        self.slope = slope

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._cache = x > 0
        return np.where(self._cache, x, self.slope * x)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        positive = self._take_cache()
        return np.where(positive, dout, self.slope * dout)


class GlobalAvgPool(Layer):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._cache = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, dout: np.ndarray) -> np.ndarray:
        b, h, w, c = self._take_cache()
        return np.broadcast_to(dout[:, None, None, :] / (h * w), (b, h, w, c)).astype(dout.dtype)


class Linear(Layer):
    def __init__(self, f_in: int, f_out: int, rng: RngStream, dtype=np.float32) -> None:
        super().__init__()
        self.params["w"] = _fan_in_uniform(rng, (f_in, f_out), f_in, dtype)
        self.params["b"] = np.zeros(f_out, dtype=dtype)
        self.zero_grads()

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._cache = x
        return x @ self.params["w"] + self.params["b"]

    def backward(self, dout: np.ndarray) -> np.ndarray:
        x = self._take_cache()
        self.grads["w"] += x.T @ dout
        self.grads["b"] += dout.sum(axis=0)
        return dout @ self.params["w"].T


class Softmax(Layer):
    def forward(self, x: np.ndarray) -> np.ndarray:
        shifted = x - x.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        probs = e / e.sum(axis=1, keepdims=True)
        self._cache = probs
        return probs

    def backward(self, dout: np.ndarray) -> np.ndarray:
        probs = self._take_cache()
        inner = np.sum(dout * probs, axis=1, keepdims=True)
        return probs * (dout - inner)


class UpsampleNearest2x(Layer):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._cache = x.shape
        return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        b, h, w, c = self._take_cache()
        return dout.reshape(b, h, 2, w, 2, c).sum(axis=(2, 4))


class Sigmoid(Layer):
    def forward(self, x: np.ndarray) -> np.ndarray:
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        self._cache = out
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        out = self._take_cache()
        return dout * out * (1.0 - out)


class Reshape(Layer):
    def __init__(self, target: tuple[int, ...]) -> None:
        super().__init__()
        self.target = target

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._cache = x.shape
        return x.reshape((x.shape[0],) + self.target)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return dout.reshape(self._take_cache())


class Stack:
    """An ordered stack of layers with namespaced parameters."""

    def __init__(self, named_layers: list[tuple[str, Layer]]) -> None:
        self.named_layers = named_layers

    def forward(self, x: np.ndarray) -> np.ndarray:
        for _, layer in self.named_layers:
            x = layer.forward(x)
        return x

    def backward(self, dout: np.ndarray) -> np.ndarray:
        for _, layer in reversed(self.named_layers):
            dout = layer.backward(dout)
        return dout

    def parameters(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self.named_layers:
            for key, p in layer.params.items():
                out[f"{prefix}{name}.{key}"] = p
        return out

    def release_caches(self) -> None:
        for _, layer in self.named_layers:
            layer._cache = None

    def gradients(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self.named_layers:
            for key, g in layer.grads.items():
                out[f"{prefix}{name}.{key}"] = g
        return out

    def zero_grads(self) -> None:
        for _, layer in self.named_layers:
            layer.zero_grads()

    def load_parameters(self, values: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, layer in self.named_layers:
            for key in layer.params:
                full = f"{prefix}{name}.{key}"
                if full not in values:
                    raise ConfigError(f"checkpoint is missing parameter {full}")
                if values[full].shape != layer.params[key].shape:
                    raise ConfigError(f"shape mismatch for {full}")
                layer.params[key] = values[full].astype(layer.params[key].dtype)
        self.zero_grads()


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------


@dataclass
class EncoderCfg:
    in_channels: int = 3
    channels: tuple[int, ...] = (16, 32, 64)
    embed_dim: int = 128
    leaky_slope: float = 0.1

    @property
    def backbone_dim(self) -> int:
        return self.channels[-1]


class EncoderNet:
    """Backbone + projection head. ``forward`` keeps the per-block feature
    maps of the latest pass in ``feature_maps`` for patch-statistic use."""

    def __init__(self, cfg: EncoderCfg, rng: RngStream, dtype=np.float32) -> None:
        self.cfg = cfg
        self.dtype = dtype
        layers: list[tuple[str, Layer]] = []
        c_prev = cfg.in_channels
        for i, c in enumerate(cfg.channels):
            layers.append((f"conv{i}", Conv2d(c_prev, c, rng.child("conv", i), stride=2, dtype=dtype)))
            layers.append((f"act{i}", LeakyReLU(cfg.leaky_slope)))
            c_prev = c
        self.blocks = Stack(layers)
        self.pool = GlobalAvgPool()
        self.proj = Stack([
            ("fc0", Linear(cfg.backbone_dim, cfg.embed_dim, rng.child("proj", 0), dtype=dtype)),
            ("pact", LeakyReLU(cfg.leaky_slope)),
            ("fc1", Linear(cfg.embed_dim, cfg.embed_dim, rng.child("proj", 1), dtype=dtype)),
        ])
        self.feature_maps: list[np.ndarray] = []

    def forward(self, images: np.ndarray) -> np.ndarray:
        x = np.ascontiguousarray(images, dtype=self.dtype)
        if x.ndim != 4 or x.shape[3] != self.cfg.in_channels:
            raise ConfigError(f"expected NHWC images with {self.cfg.in_channels} channels, got {x.shape}")
        self.feature_maps = []
        for name, layer in self.blocks.named_layers:
            x = layer.forward(x)
            if name.startswith("act"):
                self.feature_maps.append(x)
        pooled = self.pool.forward(x)
        return self.proj.forward(pooled)

    def backward(self, dembedding: np.ndarray) -> np.ndarray:
        dpooled = self.proj.backward(dembedding)
        dmaps = self.pool.backward(dpooled)
        return self.blocks.backward(dmaps)

    def encode(self, images: np.ndarray, batch: int = 64) -> np.ndarray:
        """Inference-only embedding of many images, chunked."""
        outs = [self.forward(images[i : i + batch]) for i in range(0, len(images), batch)]
        self.release_caches()
        return np.concatenate(outs, axis=0)

    def release_caches(self) -> None:
        self.blocks.release_caches()
        self.pool._cache = None
        self.proj.release_caches()

    def parameters(self) -> dict[str, np.ndarray]:
        return {**self.blocks.parameters("encoder."), **self.proj.parameters("encoder.proj.")}

    def gradients(self) -> dict[str, np.ndarray]:
        return {**self.blocks.gradients("encoder."), **self.proj.gradients("encoder.proj.")}

    def zero_grads(self) -> None:
        self.blocks.zero_grads()
        self.proj.zero_grads()

    def load_parameters(self, values: dict[str, np.ndarray]) -> None:
        self.blocks.load_parameters(values, "encoder.")
        self.proj.load_parameters(values, "encoder.proj.")


class HeadNets:
    """Augmentation-class head (Z -> n_classes) and relative-position head
    (2Z -> 8); both emit probability rows."""

    def __init__(self, embed_dim: int, n_classes: int, rng: RngStream, dtype=np.float32) -> None:
        self.aug = Stack([
            ("fc", Linear(embed_dim, n_classes, rng.child("aug_head"), dtype=dtype)),
            ("softmax", Softmax()),
        ])
        self.pos = Stack([
            ("fc", Linear(2 * embed_dim, 8, rng.child("pos_head"), dtype=dtype)),
            ("softmax", Softmax()),
        ])

    def parameters(self) -> dict[str, np.ndarray]:
        return {**self.aug.parameters("heads.aug."), **self.pos.parameters("heads.pos.")}

    def gradients(self) -> dict[str, np.ndarray]:
        return {**self.aug.gradients("heads.aug."), **self.pos.gradients("heads.pos.")}

    def zero_grads(self) -> None:
        self.aug.zero_grads()
        self.pos.zero_grads()

    def release_caches(self) -> None:
        self.aug.release_caches()
        self.pos.release_caches()

    def load_parameters(self, values: dict[str, np.ndarray]) -> None:
        self.aug.load_parameters(values, "heads.aug.")
        self.pos.load_parameters(values, "heads.pos.")


class DecoderNet:
    """Mirror decoder mapping an embedding back to an image in (0, 1)."""

    def __init__(self, cfg: EncoderCfg, out_hw: int, rng: RngStream, dtype=np.float32) -> None:
        factor = 2 ** len(cfg.channels)
        if out_hw % factor:
            raise ConfigError(f"decoder output size {out_hw} not divisible by {factor}")
        seed_hw = out_hw // factor
        c_seed = cfg.backbone_dim
        layers: list[tuple[str, Layer]] = [
            ("seed", Linear(cfg.embed_dim, seed_hw * seed_hw * c_seed, rng.child("seed"), dtype=dtype)),
            ("reshape", Reshape((seed_hw, seed_hw, c_seed))),
        ]
        channels = list(reversed(cfg.channels[:-1])) + [cfg.in_channels]
        c_prev = c_seed
        for i, c in enumerate(channels):
            layers.append((f"up{i}", UpsampleNearest2x()))
            layers.append((f"conv{i}", Conv2d(c_prev, c, rng.child("conv", i), stride=1, dtype=dtype)))
            if i < len(channels) - 1:
                layers.append((f"act{i}", LeakyReLU(cfg.leaky_slope)))
            c_prev = c
        layers.append(("out", Sigmoid()))
        self.stack = Stack(layers)
        self.out_hw = out_hw

    def forward(self, z: np.ndarray) -> np.ndarray:
        return self.stack.forward(z)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return self.stack.backward(dout)

    def parameters(self, prefix: str = "decoder.") -> dict[str, np.ndarray]:
        return self.stack.parameters(prefix)

    def gradients(self, prefix: str = "decoder.") -> dict[str, np.ndarray]:
        return self.stack.gradients(prefix)

    def zero_grads(self) -> None:
        self.stack.zero_grads()

    def load_parameters(self, values: dict[str, np.ndarray], prefix: str = "decoder.") -> None:
        self.stack.load_parameters(values, prefix)


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------


class SgdMomentum:
    """Classic momentum: v <- mu v + g; p <- p - lr v. Updates in place."""

    def __init__(self, lr: float = 0.01, momentum: float = 0.9) -> None:
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ConfigError(f"gradient shape mismatch for {name}")
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(p)
            v = self.momentum * v + g.astype(p.dtype)
            self.velocity[name] = v
            p -= self.lr * v


# ---------------------------------------------------------------------------
# Pre-training
# ---------------------------------------------------------------------------


@dataclass
class TrainCfg:
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 30
    grad_clip: float = 5.0  # global-norm cap; 0 disables
    centre_strategy: str = "untrained-encoder"
    centre_period: int = 5


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is at most
    ``max_norm``; returns the norm before clipping."""
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    centres: ClassCentres
    config_hash: bytes = ZERO_HASH
    trailer: dict = field(default_factory=dict)


NEIGHBOR_OFFSETS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def sample_patch_pair(img: np.ndarray, rng: RngStream) -> tuple[np.ndarray, np.ndarray, int]:
    """A centre patch of side H/2 plus one of its eight half-step neighbours;
    returns (centre, neighbour, neighbour index)."""
    h = img.shape[0]
    patch = h // 2
    step = h // 4
    if step < 1:
        raise ConfigError(f"image side {h} too small for patch pairs")
    label = int(rng.integers(0, 8))
    dr, dc = NEIGHBOR_OFFSETS[label]
    r0, c0 = step, step
    r1, c1 = step + dr * step, step + dc * step
    return (
        img[r0 : r0 + patch, c0 : c0 + patch],
        img[r1 : r1 + patch, c1 : c1 + patch],
        label,
    )


def _epoch_order(n: int, rng: RngStream) -> np.ndarray:
    return np.argsort(rng.uniform(n), kind="stable")


def pretrain(
    dataset: list[tuple[str, np.ndarray]],
    aug_cfg: AugConfig,
    switches: LossSwitches,
    schedule: TemperatureSchedule,
    encoder_cfg: EncoderCfg,
    train_cfg: TrainCfg,
    rng: RngStream,
    config_hash: bytes = ZERO_HASH,
    dtype=np.float32,
) -> Checkpoint:
    """Self-supervised pre-training on normal images only.

    Estimates frozen class centres with the untrained encoder, then runs
    epochs of two-view batches through the enabled loss terms with SGD
    momentum. Deterministic: the checkpoint is a pure function of
    (dataset, configs, seed). Raises NumericError with the offending batch
    and term values if any loss goes non-finite.
    """
    if not dataset:
        raise ConfigError("pretrain needs a non-empty dataset")
    encoder = EncoderNet(encoder_cfg, rng.child("init"), dtype=dtype)
    heads = HeadNets(encoder_cfg.embed_dim, aug_cfg.n_classes, rng.child("init"), dtype=dtype)

    centres = compute_centres(
        encoder.encode, dataset, aug_cfg, rng.child("centres"),
        strategy=train_cfg.centre_strategy, embed_dim=encoder_cfg.embed_dim,
    )

    optimizer = SgdMomentum(train_cfg.lr, train_cfg.momentum)
    curves: dict[str, list[float]] = {k: [] for k in ("total", "centring", "contrastive", "aug_class", "position")}

    for epoch in range(train_cfg.epochs):
        if (
            train_cfg.centre_strategy == "re-estimate"
            and epoch > 0
            and epoch % train_cfg.centre_period == 0
        ):
            fresh = compute_centres(
                encoder.encode, dataset, aug_cfg, rng.child("centres", epoch),
                strategy="re-estimate", embed_dim=encoder_cfg.embed_dim,
            )
            centres = centres.replaced(fresh.centres, at_period_boundary=True)

        order = _epoch_order(len(dataset), rng.child("shuffle", epoch))
        epoch_terms = {k: 0.0 for k in curves}
        n_batches = 0
        for start in range(0, len(dataset), train_cfg.batch_size):
            sources = [dataset[i] for i in order[start : start + train_cfg.batch_size]]
            batch_rng = rng.child("aug", epoch)
            samples = make_pretrain_batch(sources, batch_rng, aug_cfg)
            terms = _train_step(
                encoder, heads, centres, schedule, switches, samples, sources,
                rng.child("pos", epoch), optimizer, train_cfg.grad_clip, dtype,
            )
            if not np.isfinite(terms["total"]):
                raise NumericError(
                    f"non-finite loss at epoch {epoch} batch {n_batches}: "
                    + ", ".join(f"{k}={v:.6g}" for k, v in terms.items())
                )
            for k, v in terms.items():
                epoch_terms[k] += v
            n_batches += 1
        for k in curves:
            curves[k].append(epoch_terms[k] / max(n_batches, 1))

    params = {**encoder.parameters(), **heads.parameters()}
    trailer = {
        "loss_curves": curves,
        "encoder_cfg": {"in_channels": encoder_cfg.in_channels,
                        "channels": list(encoder_cfg.channels),
                        "embed_dim": encoder_cfg.embed_dim,
                        "leaky_slope": encoder_cfg.leaky_slope},
        "n_classes": aug_cfg.n_classes,
        "epochs": train_cfg.epochs,
    }
    return Checkpoint({k: v.copy() for k, v in params.items()}, centres, config_hash, trailer)


def make_position_pairs(
    sources: list[tuple[str, np.ndarray]],
    pos_rng: RngStream,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One (centre, neighbour, label) patch pair per source image."""
    firsts, seconds, labels = [], [], []
    for sid, img in sources:
        one, two, label = sample_patch_pair(img, pos_rng.child(sid))
        firsts.append(one)
        seconds.append(two)
        labels.append(label)
    return np.stack(firsts), np.stack(seconds), np.asarray(labels)


def batch_losses(
    encoder: EncoderNet,
    heads: HeadNets,
    centres: ClassCentres,
    schedule: TemperatureSchedule,
    switches: LossSwitches,
    samples,
    pos_pairs: tuple[np.ndarray, np.ndarray, np.ndarray] | None,
    dtype=np.float32,
    want_grads: bool = True,
) -> dict[str, float]:
    """Evaluate the enabled loss terms on one augmented batch.

    With ``want_grads`` the parameter gradients of encoder and heads are
    accumulated (callers zero them first); otherwise only the scalars are
    computed and all forward caches are released.
    """
    terms = {"centring": 0.0, "contrastive": 0.0, "aug_class": 0.0, "position": 0.0}

    # Position branch first: it runs its own forward/backward through the
    # encoder so the main branch's caches stay intact afterwards.
    if switches.use_position and pos_pairs is not None:
        firsts, seconds, labels = pos_pairs
        patches = np.concatenate([firsts, seconds]).astype(dtype)
        z_patches = encoder.forward(patches)
        n_pairs = len(labels)
        pair_embed = np.concatenate([z_patches[:n_pairs], z_patches[n_pairs:]], axis=1)
        probs = heads.pos.forward(pair_embed)
        pos_val, dprobs = position_loss(probs, labels)
        terms["position"] = pos_val
        if want_grads:
            w = switches.weight("position")
            dpair = heads.pos.backward(w * dprobs.astype(dtype))
            dz_patches = np.concatenate(
                [dpair[:, : z_patches.shape[1]], dpair[:, z_patches.shape[1] :]], axis=0
            )
            encoder.backward(dz_patches)
        else:
            encoder.release_caches()
            heads.pos.release_caches()

    images = np.stack([s.image for s in samples]).astype(dtype)
    embeddings = encoder.forward(images)
    batch = EmbeddingBatch(
        embeddings,
        np.array([s.class_index for s in samples]),
        np.array([s.view_index for s in samples]),
        [s.source_id for s in samples],
    )

    d_embed = np.zeros_like(embeddings)
    parts: dict[str, tuple[float, dict[str, np.ndarray]]] = {}
    if switches.use_centring:
        val, grad = centring_loss(batch, centres)
        terms["centring"] = val
        parts["centring"] = (val, {"embeddings": grad})
    if switches.use_contrastive:
        val, grad = pmsacl_loss(batch, centres, schedule)
        terms["contrastive"] = val
        parts["contrastive"] = (val, {"embeddings": grad})
    if switches.use_aug_class:
        probs = heads.aug.forward(embeddings)
        val, dprobs = aug_classification_loss(probs, batch.class_indices)
        terms["aug_class"] = val
        parts["aug_class"] = (val, {})
        if want_grads:
            d_embed += heads.aug.backward(switches.weight("aug_class") * dprobs.astype(dtype))
        else:
            heads.aug.release_caches()
    if switches.use_position and pos_pairs is not None:
        parts["position"] = (terms["position"], {})

    total_val, merged = total_loss(parts, switches)
    if want_grads:
        if "embeddings" in merged:
            d_embed += merged["embeddings"].astype(dtype)
        encoder.backward(d_embed)
    else:
        encoder.release_caches()
    terms["total"] = total_val
    return terms


def _train_step(encoder, heads, centres, schedule, switches, samples, sources,
                pos_rng, optimizer, grad_clip, dtype) -> dict[str, float]:
    encoder.zero_grads()
    heads.zero_grads()
    pos_pairs = make_position_pairs(sources, pos_rng) if switches.use_position else None
    terms = batch_losses(encoder, heads, centres, schedule, switches, samples,
                         pos_pairs, dtype=dtype, want_grads=True)
    params = {**encoder.parameters(), **heads.parameters()}
    grads = {**encoder.gradients(), **heads.gradients()}
    clip_gradients(grads, grad_clip)
    optimizer.step(params, grads)
    return terms


# ---------------------------------------------------------------------------
# Checkpoint I/O
# ---------------------------------------------------------------------------


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    records = dict(ckpt.params)
    records["centres"] = ckpt.centres.centres
    trailer = dict(ckpt.trailer)
    trailer["centres_strategy"] = ckpt.centres.strategy
    trailer["centres_frozen"] = ckpt.centres.frozen
    write_container(path, CHECKPOINT_MAGIC, ckpt.config_hash, records, trailer)


def load_checkpoint(path) -> Checkpoint:
    config_hash, records, trailer = read_container(path, CHECKPOINT_MAGIC)
    if "centres" not in records:
        raise ConfigError(f"{path}: checkpoint has no centres record")
    centres = ClassCentres(
        records.pop("centres"),
        frozen=bool(trailer.get("centres_frozen", True)),
        strategy=trailer.get("centres_strategy", "untrained-encoder"),
    )
    return Checkpoint(records, centres, config_hash, trailer)


def encoder_from_checkpoint(ckpt: Checkpoint, dtype=np.float32) -> EncoderNet:
    cfg_dict = ckpt.trailer.get("encoder_cfg")
    if not cfg_dict:
        raise ConfigError("checkpoint trailer lacks encoder_cfg")
    cfg = EncoderCfg(
        in_channels=int(cfg_dict["in_channels"]),
        channels=tuple(int(c) for c in cfg_dict["channels"]),
        embed_dim=int(cfg_dict["embed_dim"]),
        leaky_slope=float(cfg_dict["leaky_slope"]),
    )
    encoder = EncoderNet(cfg, RngStream(0, "loader"), dtype=dtype)
    encoder.load_parameters(ckpt.params)
    return encoder
