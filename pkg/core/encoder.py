from dataclasses import dataclass
from typing import Any, Dict

import numpy as np

from core.errors import ShapeMismatchError
from core.nn import functional as F
from core.nn.layers import Conv2d, ConvTranspose2d, Module
from core.nn.tensor import Tensor, as_tensor
from core.rasterizer import N_CHANNELS, Tile

STRIDE = 4


@dataclass
class EncoderOutputs:
    e_s: Tensor  # (1, H/4, W/4, C) segmentation-oriented
    e_k: Tensor  # (1, H/4, W/4, C) keypoint-oriented


def _check_input(x: Tensor) -> None:
    if x.ndim != 4 or x.shape[0] != 1 or x.shape[3] != N_CHANNELS:
        raise ShapeMismatchError(f"encoder expects a (1, H, W, {N_CHANNELS}) tile tensor, got shape {x.shape}")
    if x.shape[1] % STRIDE or x.shape[2] % STRIDE or x.shape[1] < STRIDE or x.shape[2] < STRIDE:
        raise ShapeMismatchError(f"tile height and width must be positive multiples of {STRIDE}, got {x.shape[1]}x{x.shape[2]}")


class _Backbone(Module):
    """Stem plus the three stages shared by both encoder variants (strides 1, 2 and 4)."""

    def __init__(self, name: str, channels: int, seed: int):
        self.stem = Conv2d(f"{name}.stem", N_CHANNELS, 32, 3, seed=seed)
        self.stage1 = [Conv2d(f"{name}.stage1.{i}", 32, 32, 3, seed=seed) for i in range(2)]
        self.stage2 = [Conv2d(f"{name}.stage2.0", 32, 64, 3, stride=2, seed=seed),
                       Conv2d(f"{name}.stage2.1", 64, 64, 3, seed=seed)]
        self.stage3 = [Conv2d(f"{name}.stage3.0", 64, 64, 3, stride=2, seed=seed),
                       Conv2d(f"{name}.stage3.1", 64, 64, 3, seed=seed)]
        # 2x2 stride-2 upsampling keeps the aggregation exactly shift-equivariant
        self.up3 = ConvTranspose2d(f"{name}.up3", 64, 64, 2, stride=2, seed=seed)
        self.up2 = ConvTranspose2d(f"{name}.up2", 64, 64, 2, stride=2, seed=seed)
        self.down = Conv2d(f"{name}.down", 32, 64, STRIDE, stride=STRIDE, padding=0, seed=seed)
        self.branch_s = Conv2d(f"{name}.branch_s", 64, channels, 3, seed=seed)
        self.branch_k = Conv2d(f"{name}.branch_k", 64, channels, 3, seed=seed)

    @staticmethod
    def _run(x: Tensor, convs) -> Tensor:
        for conv in convs:
            x = F.relu(conv(x))
        return x

    def stages(self, x: Tensor):
        s1 = self._run(F.relu(self.stem(x)), self.stage1)
        s2 = self._run(s1, self.stage2)
        s3 = self._run(s2, self.stage3)
        return s1, s2, s3

    def split(self, fused: Tensor) -> EncoderOutputs:
        return EncoderOutputs(e_s=F.relu(self.branch_s(fused)), e_k=F.relu(self.branch_k(fused)))


class DlaEncoder(Module):
    """
    Layer-aggregation encoder: deeper stages are upsampled and fused into shallower ones
    (concatenate, then convolve), the full-resolution aggregate is brought back to stride 4
    and fused once more with the deepest stage.
    """

    def __init__(self, channels: int = 64, seed: int = 0):
        self.channels = channels
        self.backbone = _Backbone("encoder", channels, seed)
        self.node_a = Conv2d("encoder.node_a", 128, 64, 3, seed=seed)
        self.node_b = Conv2d("encoder.node_b", 96, 32, 3, seed=seed)
        self.node_c = Conv2d("encoder.node_c", 128, 64, 1, seed=seed)

    def forward(self, x: Tensor) -> EncoderOutputs:
        _check_input(x)
        s1, s2, s3 = self.backbone.stages(x)
        a = F.relu(self.node_a(F.concat([s2, self.backbone.up3(s3)])))
        b = F.relu(self.node_b(F.concat([s1, self.backbone.up2(a)])))
        down = F.relu(self.backbone.down(b))
        fused = F.relu(self.node_c(F.concat([down, s3])))
        return self.backbone.split(fused)


class UNetEncoder(Module):
    """Plain three-level U-Net with the same stages; used when the aggregation ablation is on."""

    def __init__(self, channels: int = 64, seed: int = 0):
        self.channels = channels
        self.backbone = _Backbone("encoder", channels, seed)
        self.dec2 = Conv2d("encoder.dec2", 128, 64, 3, seed=seed)
        self.dec1 = Conv2d("encoder.dec1", 96, 32, 3, seed=seed)

    def forward(self, x: Tensor) -> EncoderOutputs:
        _check_input(x)
        s1, s2, s3 = self.backbone.stages(x)
        d2 = F.relu(self.dec2(F.concat([s2, self.backbone.up3(s3)])))
        d1 = F.relu(self.dec1(F.concat([s1, self.backbone.up2(d2)])))
        return self.backbone.split(F.relu(self.backbone.down(d1)))


def build_encoder(settings: Dict[str, Any]) -> Module:
    channels = settings["model"]["channels"]
    seed = settings["seed"]
    if settings["ablations"]["dr"]:
        return UNetEncoder(channels, seed)
    return DlaEncoder(channels, seed)


def tile_tensor(tile: Tile) -> Tensor:
    """Wraps a tile's (H, W, 11) data as a single-item NHWC batch."""
    data = np.asarray(tile.data)
    if data.ndim != 3 or data.shape[2] != N_CHANNELS:
        raise ShapeMismatchError(f"tile {tile.name} has shape {data.shape}, expected (H, W, {N_CHANNELS})")
    return as_tensor(data[None])


def encode(tile: Tile, encoder: Module) -> EncoderOutputs:
    return encoder(tile_tensor(tile))
