"""Full U-shaped model, ablation variants and checkpoint I/O."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .blocks import ColorFusion, DecoderStage, EncoderStage, MSFusion, estimate_background_light
from .nn import Conv2d, Identity, Module
from .spectral import build_initial_features
from .ssm import SS2D
from .tensor import Tensor

CHECKPOINT_MAGIC = b"HMAM"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    image_size: int = 32
    base_channels: int = 8
    multipliers: tuple = (1, 2, 4, 8)
    d_state: int = 4
    expand_factor: int = 2
    use_ms_fusion: bool = True
    use_ss2d: bool = True
    use_fft_branch: bool = True
    use_color_fusion: bool = True
    tie_scan_directions: bool = False
    # add logit(input) to the head output so an all-zero head is the identity
    global_residual: bool = True
    # None selects fan-in scaling, a float a fixed normal std for every weight
    init_std: Optional[float] = None
    # also feed the full-resolution stem features to the 1x1 head; they bypass
    # every batch norm, so per-image colour is not tied to the batch statistics
    head_skip: bool = True
    bn_momentum: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.multipliers = tuple(int(m) for m in self.multipliers)
        self.validate()

    def validate(self) -> None:
        s = self.image_size
        if s < 16 or s & (s - 1):
            raise ValueError(f"image_size must be a power of two >= 16, got {s}")
        if len(self.multipliers) != 4 or any(m < 1 for m in self.multipliers):
            raise ValueError(f"need four positive channel multipliers, got {self.multipliers}")
        if self.base_channels < 1 or self.d_state < 1 or self.expand_factor < 1:
            raise ValueError("base_channels, d_state and expand_factor must be positive")

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * m for m in self.multipliers]

    @property
    def stem_channels(self) -> int:
        return 5 if self.use_fft_branch else 3

    def to_json(self) -> str:
        d = asdict(self)
        d["multipliers"] = list(self.multipliers)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**d)


# Ablation ladder: each variant adds one block family to the previous one.
ABLATION_LADDER = {
    "base": dict(use_ms_fusion=False, use_ss2d=False, use_fft_branch=False, use_color_fusion=False),
    "+ms_fusion": dict(use_ms_fusion=True, use_ss2d=False, use_fft_branch=False, use_color_fusion=False),
    "+ss2d": dict(use_ms_fusion=True, use_ss2d=True, use_fft_branch=False, use_color_fusion=False),
    "+fft": dict(use_ms_fusion=True, use_ss2d=True, use_fft_branch=True, use_color_fusion=False),
    "+color_fusion": dict(use_ms_fusion=True, use_ss2d=True, use_fft_branch=True, use_color_fusion=True),
}


def variant_config(name: str, **overrides) -> ModelConfig:
    if name not in ABLATION_LADDER:
        raise ValueError(f"unknown variant {name!r}; choose from {list(ABLATION_LADDER)}")
    return ModelConfig(**{**ABLATION_LADDER[name], **overrides})


class HeroMamba(Module):
    """stem -> 4 encoder stages -> ColorFusion skips -> 4 decoder stages -> head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        std = cfg.init_std
        ss2d_kw = dict(d_state=cfg.d_state, expand=cfg.expand_factor,
                       tie_directions=cfg.tie_scan_directions, std=std)
        ch = cfg.channels

        if cfg.use_ss2d:
            self.stem_spatial = SS2D(3, rng, **ss2d_kw)
        else:
            self.stem_spatial = Identity()
        if cfg.use_fft_branch:
            self.stem_spectral = SS2D(2, rng, **ss2d_kw) if cfg.use_ss2d else Identity()
        else:
            self.stem_spectral = None
        self.stem_msf = MSFusion(cfg.stem_channels, rng, std) if cfg.use_ms_fusion else None

        ins = [cfg.stem_channels] + ch[:-1]
        self.encoders = [
            EncoderStage(i, o, rng, cfg.d_state, cfg.expand_factor, cfg.use_ss2d,
                         cfg.use_ms_fusion, std, cfg.tie_scan_directions)
            for i, o in zip(ins, ch)
        ]
        self.color = [ColorFusion(c, rng, std) for c in ch] if cfg.use_color_fusion else None

        # decoder k consumes d_{k-1} (+) c_{4-k}; widths mirror the encoder
        outs = [ch[2], ch[1], ch[0], ch[0]]
        dins = [ch[3] + ch[3], ch[2] + ch[2], ch[1] + ch[1], ch[0] + ch[0]]
        self.decoders = [DecoderStage(i, o, rng, std, cfg.bn_momentum) for i, o in zip(dins, outs)]
        head_in = ch[0] + (cfg.stem_channels if cfg.head_skip else 0)
        self.head = Conv2d(head_in, 3, 1, rng, std=std)
        # a half-scale head starts closer to the identity the logit skip provides
        self.head.weight.data *= 0.5

    def encode(self, img: Tensor) -> tuple[Tensor, list[Tensor], np.ndarray]:
        x = build_initial_features(img, self.stem_spatial, self.stem_spectral)
        if self.stem_msf is not None:
            x = self.stem_msf(x)
        stem = x
        feats = []
        for enc in self.encoders:
            x = enc(x)
            feats.append(x)
        return stem, feats, estimate_background_light(img.data)

    def forward(self, img) -> Tensor:
        img = T.as_tensor(img)
        s = self.cfg.image_size
        if img.ndim != 4 or img.shape[1] != 3 or img.shape[2:] != (s, s):
            raise ValueError(f"model expects N x 3 x {s} x {s} input, got {img.shape}")
        stem, feats, b_e = self.encode(img)
        if self.color is not None:
            skips = [cf(f, b_e) for cf, f in zip(self.color, feats)]
        else:
            skips = feats
        d = feats[-1]
        for k, dec in enumerate(self.decoders):
            d = dec(d, skips[3 - k])
        out = self.head(T.concat([d, stem], axis=1) if self.cfg.head_skip else d)
        if self.cfg.global_residual:
            x = np.clip(img.data, 1e-4, 1 - 1e-4)
            out = out + Tensor(np.log(x / (1 - x)))
        return T.sigmoid(out)

    def omegas(self) -> list[float]:
        return [cf.omega for cf in self.color] if self.color is not None else []


def build_network(cfg: ModelConfig, seed: Optional[int] = None) -> HeroMamba:
    if seed is not None:
        cfg = ModelConfig.from_dict({**json.loads(cfg.to_json()), "seed": seed})
    return HeroMamba(cfg)


def parameter_count(model: Module) -> int:
    return int(sum(p.size for p in model.parameters()))


# ---------------------------------------------------------------------------
# binary tensor files
# ---------------------------------------------------------------------------


def write_tensor_file(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write ``HMAM | u32 version | json header | named float32 tensors``.

    All integers are little-endian u32; tensors are written in name order as
    ``(name, ndim, dims..., raw float32 data)``. Non-finite values are refused.
    """
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    hdr = json.dumps(header, sort_keys=True).encode()
    chunks += [struct.pack("<I", len(hdr)), hdr, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if not np.isfinite(arr).all():
            raise ValueError(f"refusing to write non-finite values in {name}")
        raw = name.encode()
        chunks += [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim)]
        chunks += [struct.pack("<I", d) for d in arr.shape]
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def read_tensor_file(path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    pos = 4

    def u32():
        nonlocal pos
        (v,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        return v

    version = u32()
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    n = u32()
    header = json.loads(buf[pos:pos + n].decode())
    pos += n
    tensors = {}
    for _ in range(u32()):
        n = u32()
        name = buf[pos:pos + n].decode()
        pos += n
        shape = tuple(u32() for _ in range(u32()))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += 4 * count
        tensors[name] = arr.astype(np.float32)
    return header, tensors


def save_checkpoint(model: HeroMamba, path) -> None:
    header = {"kind": "model", "config": json.loads(model.cfg.to_json())}
    write_tensor_file(path, header, model.state_dict())


def load_checkpoint(path) -> HeroMamba:
    header, tensors = read_tensor_file(path)
    if header.get("kind") != "model":
        raise ValueError(f"{path}: not a model checkpoint")
    model = HeroMamba(ModelConfig.from_dict(header["config"]))
    model.load_state_dict(tensors)
    return model
