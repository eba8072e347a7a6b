"""Plain key=value pipeline configuration with sections, a typo shield and
a stable content hash carried by every artifact.

Every tunable has a default mirroring the training recipe; unknown keys or
sections are errors.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import get_type_hints

from .detect import IGDTrainCfg
from .errors import ConfigError
from .losses import LossSwitches, TemperatureSchedule
from .medmix import AugConfig, WeakAugCfg
from .network import EncoderCfg, TrainCfg


@dataclass
class LossCfg:
    temperature: float = 0.2
    temperature_scale: float = 2.0  # same-class shrinkage; >1 softens same-class repulsion
    use_centring: bool = True
    use_contrastive: bool = True
    use_aug_class: bool = True
    use_position: bool = True
    w_centring: float = 1.0
    w_contrastive: float = 1.0
    w_aug_class: float = 1.0
    w_position: float = 1.0
    centre_strategy: str = "untrained-encoder"
    centre_period: int = 5

    def schedule(self) -> TemperatureSchedule:
        return TemperatureSchedule(tau=self.temperature, alpha=self.temperature_scale)

    def switches(self) -> LossSwitches:
        return LossSwitches(
            use_centring=self.use_centring,
            use_contrastive=self.use_contrastive,
            use_aug_class=self.use_aug_class,
            use_position=self.use_position,
            weights={
                "centring": self.w_centring,
                "contrastive": self.w_contrastive,
                "aug_class": self.w_aug_class,
                "position": self.w_position,
            },
        )


@dataclass
class EncoderPipelineCfg:
    channels: tuple[int, ...] = (16, 32, 64)
    embed_dim: int = 128
    leaky_slope: float = 0.1
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 30
    grad_clip: float = 5.0

    def encoder_cfg(self) -> EncoderCfg:
        return EncoderCfg(channels=self.channels, embed_dim=self.embed_dim,
                          leaky_slope=self.leaky_slope)

    def train_cfg(self, loss: LossCfg) -> TrainCfg:
        return TrainCfg(batch_size=self.batch_size, lr=self.lr, momentum=self.momentum,
                        epochs=self.epochs, grad_clip=self.grad_clip,
                        centre_strategy=loss.centre_strategy,
                        centre_period=loss.centre_period)


@dataclass
class DetectCfg:
    padim_eps: float = 0.01  # covariance shrinkage inherited from the patch-Gaussian method
    padim_subset: int = 0  # 0 = use all channels
    igd_epochs: int = 10
    igd_batch: int = 32
    igd_lr: float = 0.01
    igd_momentum: float = 0.9
    igd_grad_clip: float = 5.0
    xi: float = 0.5
    rho: float = 0.5
    nu: float = 0.5
    kappa_reg: float = 0.25
    scales_global: int = 3
    scales_local: int = 2
    patch_side: int = 32
    literal_score_direction: bool = False

    def igd_cfg(self) -> IGDTrainCfg:
        return IGDTrainCfg(
            epochs=self.igd_epochs, batch_size=self.igd_batch, lr=self.igd_lr,
            momentum=self.igd_momentum, grad_clip=self.igd_grad_clip,
            xi=self.xi, rho=self.rho, nu=self.nu,
            kappa_reg=self.kappa_reg, scales_global=self.scales_global,
            scales_local=self.scales_local, patch_side=self.patch_side,
            literal_score_direction=self.literal_score_direction,
        )


@dataclass
class EvalCfg:
    fpr_limit: float = 0.3
    group_count: int = 5
    group_size: int = 50
    seg_threshold_candidates: int = 64


@dataclass
class SynthCfg:
    train_normals: int = 200
    val_normals: int = 50
    val_abnormals: int = 50
    test_normals: int = 100
    test_abnormals: int = 100
    lesion_margin: float = 0.25
    hard_margin: float = 0.10
    lesion_min: int = 1
    lesion_max: int = 3


@dataclass
class RunConfig:
    seed: int = 1
    image_size: int = 64
    aug: AugConfig = field(default_factory=AugConfig)
    loss: LossCfg = field(default_factory=LossCfg)
    encoder: EncoderPipelineCfg = field(default_factory=EncoderPipelineCfg)
    detect: DetectCfg = field(default_factory=DetectCfg)
    eval: EvalCfg = field(default_factory=EvalCfg)
    synth: SynthCfg = field(default_factory=SynthCfg)

    def validate(self) -> "RunConfig":
        self.aug.validate()
        if self.image_size % 8:
            raise ConfigError(f"image_size must be divisible by 8, got {self.image_size}")
        if self.image_size % self.detect.patch_side:
            raise ConfigError(
                f"image_size {self.image_size} not tileable by patch_side {self.detect.patch_side}"
            )
        return self


_SECTIONS = {
    "run": None,  # scalar fields on RunConfig itself
    "aug": ("aug", AugConfig),
    "weak": ("aug.weak", WeakAugCfg),
    "loss": ("loss", LossCfg),
    "encoder": ("encoder", EncoderPipelineCfg),
    "detect": ("detect", DetectCfg),
    "eval": ("eval", EvalCfg),
    "synth": ("synth", SynthCfg),
}


def _convert(raw: str, target_type, key: str):
    try:
        if target_type is bool:
            low = raw.strip().lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        if target_type is str:
            return raw.strip()
        if target_type == tuple[int, ...]:
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"cannot parse {key}={raw!r} as {target_type}") from exc
    raise ConfigError(f"unsupported config type for {key}")


def _set_fields(obj, section: str, items: dict[str, str]) -> None:
    hints = get_type_hints(type(obj))
    known = {f.name for f in fields(obj) if f.name != "weak"}
    for key, raw in items.items():
        if key not in known:
            raise ConfigError(f"unknown key [{section}] {key}")
        setattr(obj, key, _convert(raw, hints[key], f"[{section}] {key}"))


def load_config(path: str | Path | None, seed_override: int | None = None) -> RunConfig:
    """Parse a config file (or defaults when None), applying a seed override."""
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        parser.optionxform = str  # case-sensitive keys
        text = Path(path).read_text()
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            items = dict(parser.items(section))
            if section == "run":
                _set_fields(cfg, "run", {k: v for k, v in items.items() if k in ("seed", "image_size")})
                unknown = set(items) - {"seed", "image_size"}
                if unknown:
                    raise ConfigError(f"unknown key [run] {sorted(unknown)[0]}")
            elif section == "weak":
                _set_fields(cfg.aug.weak, "weak", items)
            else:
                attr, _ = _SECTIONS[section]
                _set_fields(getattr(cfg, attr), section, items)
    if seed_override is not None:
        cfg.seed = seed_override
    return cfg.validate()


def dump_config(cfg: RunConfig) -> str:
    """Canonical text rendering used for hashing and artifact metadata."""
    out = io.StringIO()

    def emit(section: str, obj, skip=()):
        out.write(f"[{section}]\n")
        for f in sorted(fields(obj), key=lambda f: f.name):
            if f.name in skip:
                continue
            value = getattr(obj, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            out.write(f"{f.name} = {value}\n")

    out.write(f"[run]\nimage_size = {cfg.image_size}\nseed = {cfg.seed}\n")
    emit("aug", cfg.aug, skip=("weak",))
    emit("weak", cfg.aug.weak)
    emit("loss", cfg.loss)
    emit("encoder", cfg.encoder)
    emit("detect", cfg.detect)
    emit("eval", cfg.eval)
    emit("synth", cfg.synth)
    return out.getvalue()


def config_hash(cfg: RunConfig) -> bytes:
    return hashlib.sha256(dump_config(cfg).encode("utf-8")).digest()
