"""3D-CNN encoder-decoder with temporal attention before each temporal up-sampling.

Backbone layout (PhysNet-style, widths ``(c1, c2, c3)`` default 16/32/64)::

    stem     Conv3d 3->c1 [1,5,5]           T,   S
    pool     MaxPool [1,2,2]                T,   S/2
    enc1     Conv3d c1->c2, c2->c3 [3,3,3]
    pool     MaxPool [2,2,2]                T/2, S/4
    enc2     2x Conv3d c3->c3
    pool     MaxPool [2,2,2]                T/4, S/8
    enc3     2x Conv3d c3->c3
    pool     MaxPool [1,2,2]                T/4, S/16
    enc4     2x Conv3d c3->c3
    tam1     temporal attention at T/4
    up1      ConvTranspose3d [4,1,1] stride [2,1,1]   T/2
    tam2     temporal attention at T/2
    up2      ConvTranspose3d                          T
    head     spatial mean, Conv3d c3->1 [1,1,1]       (T,)

Every conv is followed by BatchNorm and ReLU, the up-sampling layers by
BatchNorm and ELU.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from .errors import ConfigError

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    T: int = 768
    reduction: int = 16
    widths: tuple[int, int, int] = (16, 32, 64)
    input_size: int = 72
    attention: bool = True

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        self.validate()

    def validate(self) -> None:
        if self.T < 4 or self.T % 4:
            raise ConfigError(f"T must be a positive multiple of 4, got {self.T}")
        if len(self.widths) != 3 or min(self.widths) < 1:
            raise ConfigError(f"widths must be three positive ints, got {self.widths}")
        if self.input_size < 16:
            raise ConfigError("input_size must be >= 16 (four spatial halvings)")
        if self.attention:
            for length in (self.T // 4, self.T // 2):
                if self.reduction < 1 or length % self.reduction:
                    raise ConfigError(
                        f"reduction {self.reduction} must divide the attention length {length}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        return d


class TemporalAttention(nn.Module):
    """Temporal attention module.

    Spatial average pooling ``(C, L, w, h) -> (C, L, 1, 1)``, a 1x1x1 conv
    folding channels to one, then an MLP ``L -> L/r -> L`` along time with a
    ReLU hidden layer and sigmoid output. The length-``L`` weights multiply
    the input broadcast over channels and space.
    """

    def __init__(self, channels: int, length: int, reduction: int = 16):
        super().__init__()
        if length % reduction:
            raise ConfigError(f"reduction {reduction} does not divide length {length}")
        self.length = length
        self.pool = nn.AdaptiveAvgPool3d((length, 1, 1))
        self.conv = nn.Conv3d(channels, 1, kernel_size=1, stride=1, padding=0)
        self.mlp = nn.Sequential(
            nn.Linear(length, length // reduction),
            nn.ReLU(inplace=True),
            nn.Linear(length // reduction, length),
        )

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        """Attention weights of shape (B, L), each strictly inside (0, 1)."""
        z = self.conv(self.pool(x)).flatten(1)
        return torch.sigmoid(self.mlp(z))

    @staticmethod
    def apply(x: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
        return x * weights[:, None, :, None, None]

    def forward(self, x: torch.Tensor, weights: Optional[torch.Tensor] = None):
        if weights is None:
            weights = self.attention(x)
        return self.apply(x, weights), weights


def _conv(cin, cout, kernel, padding):
    return nn.Sequential(
        nn.Conv3d(cin, cout, kernel, stride=1, padding=padding, bias=False),
        nn.BatchNorm3d(cout),
        nn.ReLU(inplace=True),
    )


def _upsample(c):
    return nn.Sequential(
        nn.ConvTranspose3d(c, c, kernel_size=(4, 1, 1), stride=(2, 1, 1), padding=(1, 0, 0), bias=False),
        nn.BatchNorm3d(c),
        nn.ELU(),
    )


class SympCamNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c1, c2, c3 = config.widths
        self.stem = _conv(3, c1, (1, 5, 5), (0, 2, 2))
        self.enc1 = nn.Sequential(_conv(c1, c2, 3, 1), _conv(c2, c3, 3, 1))
        self.enc2 = nn.Sequential(_conv(c3, c3, 3, 1), _conv(c3, c3, 3, 1))
        self.enc3 = nn.Sequential(_conv(c3, c3, 3, 1), _conv(c3, c3, 3, 1))
        self.enc4 = nn.Sequential(_conv(c3, c3, 3, 1), _conv(c3, c3, 3, 1))
        self.pool_spa = nn.MaxPool3d((1, 2, 2), stride=(1, 2, 2))
        self.pool_spatem = nn.MaxPool3d((2, 2, 2), stride=2)
        if config.attention:
            self.tam1 = TemporalAttention(c3, config.T // 4, config.reduction)
            self.tam2 = TemporalAttention(c3, config.T // 2, config.reduction)
        else:
            self.tam1 = self.tam2 = None
        self.up1 = _upsample(c3)
        self.up2 = _upsample(c3)
        self.head = nn.Conv3d(c3, 1, kernel_size=1)

    def forward(self, x: torch.Tensor, return_attention: bool = False):
        """``x``: (B, 3, T, H, W) -> (B, T)."""
        T = self.config.T
        if x.ndim != 5 or x.shape[1] != 3 or x.shape[2] != T:
            raise ValueError(f"expected input (B, 3, {T}, H, W), got {tuple(x.shape)}")
        maps = []
        x = self.pool_spa(self.stem(x))
        x = self.pool_spatem(self.enc1(x))
        x = self.pool_spatem(self.enc2(x))
        x = self.pool_spa(self.enc3(x))
        x = self.enc4(x)
        if self.tam1 is not None:
            x, a = self.tam1(x)
            maps.append(a)
        x = self.up1(x)
        if self.tam2 is not None:
            x, a = self.tam2(x)
            maps.append(a)
        x = self.up2(x)
        out = self.head(x.mean(dim=(3, 4), keepdim=True)).reshape(x.shape[0], T)
        return (out, maps) if return_attention else out


def build_model(config: ModelConfig) -> SympCamNet:
    config.validate()
    return SympCamNet(config)


def clips_to_tensor(diff_frames, dtype=torch.float32) -> torch.Tensor:
    """(T, H, W, 3) or (B, T, H, W, 3) array -> (B, 3, T, H, W) tensor."""
    x = torch.as_tensor(np.asarray(diff_frames), dtype=dtype)
    if x.ndim == 4:
        x = x[None]
    return x.permute(0, 4, 1, 2, 3).contiguous()


def forward(model: SympCamNet, clip) -> np.ndarray:
    """Inference on one :class:`NormalizedClip` (or raw diff-frame array)."""
    frames = getattr(clip, "diff_frames", clip)
    cfg = model.config
    if np.shape(frames)[0] != cfg.T or np.shape(frames)[1:3] != (cfg.input_size, cfg.input_size):
        raise ValueError(f"clip of shape {np.shape(frames)} does not match T={cfg.T}, "
                         f"input {cfg.input_size}x{cfg.input_size}")
    was_training = model.training
    model.eval()
    try:
        dtype = next(model.parameters()).dtype
        with torch.no_grad():
            out = model(clips_to_tensor(frames, dtype))
    finally:
        model.train(was_training)
    return out[0].cpu().numpy()


def count_parameters(model: nn.Module) -> dict:
    per = {name: sum(p.numel() for p in child.parameters())
           for name, child in model.named_children()}
    per = {k: v for k, v in per.items() if v}
    total = sum(p.numel() for p in model.parameters())
    return {"total": total, "per_submodule": per,
            "attention": sum(v for k, v in per.items() if k.startswith("tam"))}


def estimate_macs(config: ModelConfig, batch_size: int = 1) -> int:
    """Multiply-accumulate count of one forward pass (convs and linears).

    Shapes are traced on the ``meta`` device, so no activations are allocated.
    """
    with torch.device("meta"):
        model = SympCamNet(config)
        x = torch.empty(batch_size, 3, config.T, config.input_size, config.input_size)
    total = 0

    def hook(mod, inp, out):
        nonlocal total
        if isinstance(mod, nn.Conv3d):
            k = mod.in_channels // mod.groups * int(np.prod(mod.kernel_size))
            total += out.numel() * k
        elif isinstance(mod, nn.ConvTranspose3d):
            total += inp[0].numel() * mod.out_channels * int(np.prod(mod.kernel_size))
        elif isinstance(mod, nn.Linear):
            total += out.numel() * mod.in_features

    handles = [m.register_forward_hook(hook) for m in model.modules()
               if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d, nn.Linear))]
    with torch.no_grad():
        model(x)
    for h in handles:
        h.remove()
    return int(total)


def save_checkpoint(model: SympCamNet, path: str | Path, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }, path)
    return path


def load_checkpoint(path: str | Path) -> tuple[SympCamNet, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    model = build_model(ModelConfig(**blob["config"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob.get("extra", {})
