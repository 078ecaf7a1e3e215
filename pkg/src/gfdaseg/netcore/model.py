"""Tiny encoder / projection heads / decoder, and the parameter container."""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class NetConfig:
    image_size: int = 64
    in_channels: int = 1
    enc_widths: tuple = (8, 16, 16)
    head_hidden: int = 16
    head_out: int = 8
    dec_widths: tuple = (16, 8, 8)
    n_classes: int = 2

    @property
    def feat_dim(self) -> int:
        return self.enc_widths[-1]

    @property
    def grid_size(self) -> int:
        return self.image_size >> len(self.enc_widths)

    @property
    def cell_size(self) -> int:
        return 1 << len(self.enc_widths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enc_widths"] = list(self.enc_widths)
        d["dec_widths"] = list(self.dec_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        d["enc_widths"] = tuple(d["enc_widths"])
        d["dec_widths"] = tuple(d["dec_widths"])
        return cls(**d)


DESK = NetConfig()
# small enough for exhaustive finite-difference checks
REDUCED = NetConfig(image_size=16, enc_widths=(2, 4, 4), head_hidden=4, head_out=4,
                    dec_widths=(4, 2, 2))


def encoder_shapes(cfg: NetConfig, prefix: str = "enc") -> dict[str, tuple]:
    shapes, cin = {}, cfg.in_channels
    for i, cout in enumerate(cfg.enc_widths, 1):
        shapes[f"{prefix}.conv{i}.w"] = (3, 3, cin, cout)
        shapes[f"{prefix}.conv{i}.b"] = (cout,)
        cin = cout
    return shapes


def head_shapes(cfg: NetConfig, prefix: str) -> dict[str, tuple]:
    return {
        f"{prefix}.fc1.w": (cfg.feat_dim, cfg.head_hidden),
        f"{prefix}.fc1.b": (cfg.head_hidden,),
        f"{prefix}.fc2.w": (cfg.head_hidden, cfg.head_out),
        f"{prefix}.fc2.b": (cfg.head_out,),
    }


def decoder_shapes(cfg: NetConfig, prefix: str = "dec") -> dict[str, tuple]:
    shapes, cin = {}, cfg.feat_dim
    for i, cout in enumerate(cfg.dec_widths, 1):
        shapes[f"{prefix}.conv{i}.w"] = (3, 3, cin, cout)
        shapes[f"{prefix}.conv{i}.b"] = (cout,)
        cin = cout
    shapes[f"{prefix}.out.w"] = (1, 1, cin, cfg.n_classes)
    shapes[f"{prefix}.out.b"] = (cfg.n_classes,)
    return shapes


def init_param(name: str, shape: tuple, seed: int) -> np.ndarray:
    """Glorot-uniform weights, zero biases; stream keyed by (seed, name)."""
    if name.endswith(".b"):
        return np.zeros(shape)
    if len(shape) == 4:
        k = shape[0] * shape[1]
        fan_in, fan_out = k * shape[2], k * shape[3]
    else:
        fan_in, fan_out = shape[0], shape[-1]
    a = np.sqrt(6.0 / (fan_in + fan_out))
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    return rng.uniform(-a, a, size=shape)


def init_params(shapes: dict[str, tuple], seed: int) -> dict[str, np.ndarray]:
    return {name: init_param(name, shape, seed) for name, shape in shapes.items()}


def rename(params: dict[str, np.ndarray], old: str, new: str) -> dict[str, np.ndarray]:
    return {new + k[len(old):]: v.copy() for k, v in params.items() if k.startswith(old + ".")}


def select(params: dict, prefix: str) -> dict:
    return {k: v for k, v in params.items() if k.startswith(prefix + ".")}


@dataclass
class ModelState:
    """All learnable arrays, keyed by dotted names.

    Groups: ``enc`` (E), ``mom.enc`` (E'), ``style`` / ``content`` heads,
    ``dfpm.k``, ``dec`` (D) and the stage-2 teacher under ``teacher.``.
    """

    config: NetConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, config: NetConfig, seed: int) -> "ModelState":
        shapes = {}
        shapes.update(encoder_shapes(config, "enc"))
        shapes.update(head_shapes(config, "style"))
        shapes.update(head_shapes(config, "content"))
        shapes["dfpm.k"] = (config.feat_dim, config.feat_dim)
        shapes.update(decoder_shapes(config, "dec"))
        params = init_params(shapes, seed)
        params.update(rename(select(params, "enc"), "enc", "mom.enc"))
        return cls(config, params)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        return select(self.params, prefix)

    def init_teacher(self, seed: int, copy: bool = False) -> None:
        """Teacher encoder/decoder: a fresh random draw, or a copy of the student."""
        if copy:
            for src in ("enc", "dec"):
                self.params.update(rename(self.group(src), src, f"teacher.{src}"))
            return
        shapes = {}
        shapes.update(encoder_shapes(self.config, "teacher.enc"))
        shapes.update(decoder_shapes(self.config, "teacher.dec"))
        self.params.update(init_params(shapes, seed))

    def copy(self) -> "ModelState":
        return ModelState(self.config, {k: v.copy() for k, v in self.params.items()})

    def n_params(self, prefix: str | None = None) -> int:
        items = self.params.items() if prefix is None else self.group(prefix).items()
        return int(sum(v.size for _, v in items))


def as_tensors(params: dict[str, np.ndarray], trainable: bool) -> dict[str, Tensor]:
    if trainable:
        return {k: ad.param(v, k) for k, v in params.items()}
    return {k: Tensor(v) for k, v in params.items()}


def encoder_forward(p: dict, x, cfg: NetConfig, prefix: str = "enc") -> tuple[Tensor, Tensor]:
    """Returns the final feature map (N, g, g, D) and its spatial mean (N, D)."""
    x = ad.as_tensor(x)
    if x.shape[1:] != (cfg.image_size, cfg.image_size, cfg.in_channels):
        raise ValueError(
            f"encoder expects (N, {cfg.image_size}, {cfg.image_size}, {cfg.in_channels}), "
            f"got {x.shape}"
        )
    h = x
    for i in range(1, len(cfg.enc_widths) + 1):
        h = ad.relu(ad.conv2d(h, p[f"{prefix}.conv{i}.w"], p[f"{prefix}.conv{i}.b"], stride=2))
    return h, ad.mean(h, axis=(1, 2))


def head_forward(p: dict, z, prefix: str) -> Tensor:
    h = ad.relu(ad.as_tensor(z) @ p[f"{prefix}.fc1.w"] + p[f"{prefix}.fc1.b"])
    return h @ p[f"{prefix}.fc2.w"] + p[f"{prefix}.fc2.b"]


def decoder_forward(p: dict, feat, cfg: NetConfig, prefix: str = "dec") -> Tensor:
    """Per-pixel class logits (N, H, W, K) at input resolution."""
    h = ad.as_tensor(feat)
    for i in range(1, len(cfg.dec_widths) + 1):
        # same as conv2d(upsample2x(h)), evaluated at the lower resolution
        h = ad.relu(ad.upsample_conv2d(h, p[f"{prefix}.conv{i}.w"], p[f"{prefix}.conv{i}.b"]))
    return ad.conv2d(h, p[f"{prefix}.out.w"], p[f"{prefix}.out.b"])


def segment_logits(params: dict[str, np.ndarray], images: np.ndarray, cfg: NetConfig,
                   prefix: str = "") -> np.ndarray:
    """Gradient-free encoder+decoder pass (student by default)."""
    p = as_tensors(params, trainable=False)
    feat, _ = encoder_forward(p, images, cfg, prefix + "enc")
    return decoder_forward(p, feat, cfg, prefix + "dec").data
