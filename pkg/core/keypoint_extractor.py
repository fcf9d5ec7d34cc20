import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
from scipy import ndimage

from core.errors import ShapeMismatchError
from core.nn import functional as F
from core.nn.layers import Conv2d, ConvTranspose2d, Module, MultiHeadSelfAttention, PositionalEmbedding
from core.nn.tensor import Tensor, as_tensor
from core.rasterizer import SupervisionTile

SMOOTH_KERNEL_SIZE = 5


@dataclass
class AfimOutputs:
    e_ek: Tensor  # (1, h, w, C) enhanced keypoint-oriented representation
    guidance: Tensor  # (1, h, w, C) in (0, 1)
    attention: Optional[Tensor] = None  # (heads, 2l^2, 2l^2) weights, None when ablated


@dataclass
class HeatmapPair:
    o_k: Tensor  # (1, H, W, 1) keypoint probability
    o_r: Tensor  # (1, H, W, 1) road-region probability


@dataclass
class KeypointSet:
    cells: np.ndarray  # (n, 2) int64 tile-local (row, col)
    scores: np.ndarray  # (n,) smoothed confidence

    def __len__(self) -> int:
        return len(self.cells)

    @classmethod
    def empty(cls) -> "KeypointSet":
        return cls(np.zeros((0, 2), dtype=np.int64), np.zeros(0))

    @classmethod
    def from_xy(cls, xy: np.ndarray) -> "KeypointSet":
        """Keypoints from tile-local (x, y) positions, snapped to the cell that holds them."""
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        cells = np.floor(xy[:, ::-1]).astype(np.int64)
        return cls(cells, np.ones(len(cells)))

    def xy(self) -> np.ndarray:
        """(n, 2) float (x, y) = (col, row) cell coordinates."""
        return self.cells[:, ::-1].astype(np.float64)


class Afim(Module):
    """
    Attentive feature interaction: both representations are pooled to an l x l token grid,
    attend jointly, are upsampled back and turned into a sigmoid guidance map that gates the
    keypoint representation residually.
    """

    def __init__(self, channels: int = 64, resolution: int = 16, heads: int = 4, seed: int = 0,
                 literal_concat: bool = False, ablated: bool = False):
        self.channels = channels
        self.resolution = resolution
        self.literal_concat = literal_concat
        self.ablated = ablated
        if ablated:
            self.fuse = Conv2d("afim.fuse", 2 * channels, channels, 1, seed=seed)
            return
        tokens = resolution * resolution
        self.pos_s = PositionalEmbedding("afim.pos_s", tokens, channels, seed)
        self.pos_k = PositionalEmbedding("afim.pos_k", tokens, channels, seed)
        self.attn = MultiHeadSelfAttention("afim.attn", channels, heads, seed)
        self.guide1 = Conv2d("afim.guide1", 2 * channels, channels, 1, seed=seed)
        self.guide2 = Conv2d("afim.guide2", channels, channels, 1, seed=seed)

    def forward(self, e_s: Tensor, e_k: Tensor, guidance_override: Optional[np.ndarray] = None) -> AfimOutputs:
        if e_s.shape != e_k.shape:
            raise ShapeMismatchError(f"feature interaction needs equal shapes, got {e_s.shape} and {e_k.shape}")
        if e_s.ndim != 4 or e_s.shape[0] != 1 or e_s.shape[3] != self.channels:
            raise ShapeMismatchError(f"feature interaction expects (1, h, w, {self.channels}), got {e_s.shape}")
        _, h, w, c = e_s.shape

        attention = None
        if self.ablated:
            guidance = F.sigmoid(self.fuse(F.concat([e_s, e_k])))
        else:
            l = self.resolution
            tokens = l * l
            x_s = self.pos_s(F.bilinear_resize(e_s, l, l).reshape(tokens, c))
            x_k = self.pos_k(F.bilinear_resize(e_k, l, l).reshape(tokens, c))
            fused, attention = self.attn(F.concat([x_s, x_k], axis=0), return_weights=True)
            x_sf = F.bilinear_resize(fused[:tokens].reshape(1, l, l, c), h, w)
            x_kf = x_sf if self.literal_concat else F.bilinear_resize(fused[tokens:].reshape(1, l, l, c), h, w)
            e_g = F.concat([x_sf, x_kf])
            guidance = F.sigmoid(self.guide2(F.leaky_relu(self.guide1(e_g))))

        if guidance_override is not None:
            guidance = as_tensor(np.broadcast_to(guidance_override, e_k.shape), e_k.dtype)
        e_ek = e_k + guidance * e_k
        return AfimOutputs(e_ek=e_ek, guidance=guidance, attention=attention)


class DecoderHead(Module):
    """Two stride-2 transposed convolutions back to tile resolution, then a 1x1 stack to one sigmoid channel."""

    def __init__(self, name: str, channels: int = 64, seed: int = 0):
        self.up1 = ConvTranspose2d(f"{name}.up1", channels, 32, seed=seed)
        self.up2 = ConvTranspose2d(f"{name}.up2", 32, 16, seed=seed)
        self.conv1 = Conv2d(f"{name}.conv1", 16, 16, 1, seed=seed)
        self.conv2 = Conv2d(f"{name}.conv2", 16, 1, 1, seed=seed)

    def forward(self, x: Tensor) -> Tensor:
        x = F.relu(self.up1(x))
        x = F.relu(self.up2(x))
        x = F.relu(self.conv1(x))
        return F.sigmoid(self.conv2(x))


def build_heads(settings: Dict[str, Any]):
    """Keypoint and region heads; with the dual-decoding ablation both are one shared head."""
    channels = settings["model"]["channels"]
    seed = settings["seed"]
    kp_head = DecoderHead("head_kp", channels, seed)
    if settings["ablations"]["dd"]:
        return kp_head, kp_head
    return kp_head, DecoderHead("head_region", channels, seed)


def decode_heads(e_ek: Tensor, e_s: Tensor, kp_head: DecoderHead, region_head: DecoderHead) -> HeatmapPair:
    if e_ek.shape != e_s.shape:
        raise ShapeMismatchError(f"decoder inputs differ in shape: {e_ek.shape} vs {e_s.shape}")
    return HeatmapPair(o_k=kp_head(e_ek), o_r=region_head(e_s))


# ------------------ EXTRACTION ------------------

def gaussian_kernel(sigma: float, size: int = SMOOTH_KERNEL_SIZE) -> np.ndarray:
    half = size // 2
    yy, xx = np.mgrid[-half:half + 1, -half:half + 1]
    kernel = np.exp(-(xx ** 2 + yy ** 2) / (2 * sigma ** 2))
    return kernel / kernel.sum()


def smooth_heatmap(heatmap: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    """Gaussian smoothing; near the border the kernel is renormalized over in-image cells."""
    field = np.asarray(heatmap, dtype=np.float64)
    kernel = gaussian_kernel(sigma)
    num = ndimage.convolve(field, kernel, mode="constant", cval=0.0)
    den = ndimage.convolve(np.ones_like(field), kernel, mode="constant", cval=0.0)
    return num / den


def local_maxima(smoothed: np.ndarray, threshold: float = 0.3, window: int = 1) -> np.ndarray:
    """
    Boolean map of cells that are >= every in-image neighbour of the (2w+1)^2 window,
    strictly above at least one of them, and >= threshold. When equal neighbouring cells
    both qualify, only the lexicographically smallest (row, col) survives.
    """
    v = np.asarray(smoothed, dtype=np.float64)
    size = 2 * window + 1
    hi = ndimage.maximum_filter(v, size=size, mode="constant", cval=-np.inf)
    lo = ndimage.minimum_filter(v, size=size, mode="constant", cval=np.inf)
    candidates = (v >= hi) & (v > lo) & (v >= threshold)

    padded_v = np.pad(v, window, mode="constant", constant_values=np.nan)
    padded_c = np.pad(candidates, window, mode="constant", constant_values=False)
    rows, cols = v.shape
    peaks = candidates.copy()
    for dr in range(-window, 1):
        for dc in range(-window, window + 1):
            if dr == 0 and dc >= 0:
                break
            r0, c0 = window + dr, window + dc
            earlier_v = padded_v[r0:r0 + rows, c0:c0 + cols]
            earlier_c = padded_c[r0:r0 + rows, c0:c0 + cols]
            peaks &= ~(earlier_c & (earlier_v == v))
    return peaks


def as_map(values) -> np.ndarray:
    """(H, W) float64 view of a heatmap given as (H, W), (H, W, 1) or (1, H, W, 1)."""
    data = np.asarray(values.data if isinstance(values, Tensor) else values, dtype=np.float64)
    if data.ndim == 4:
        data = data[0]
    if data.ndim == 3:
        data = data[..., 0]
    if data.ndim != 2:
        raise ShapeMismatchError(f"heatmap must be two-dimensional, got shape {data.shape}")
    return data


def extract_keypoints(o_k, sigma_smooth: float = 1.0, threshold: float = 0.3, window: int = 1) -> KeypointSet:
    smoothed = smooth_heatmap(as_map(o_k), sigma_smooth)
    peaks = local_maxima(smoothed, threshold, window)
    cells = np.argwhere(peaks).astype(np.int64)
    return KeypointSet(cells, smoothed[peaks])


# ------------------ LOSS ------------------

def keypoint_loss(pred: HeatmapPair, gt: SupervisionTile, lambda1: float = 1.0) -> Tensor:
    """Mean BCE on the keypoint map plus lambda1 times mean BCE on the region mask."""
    target_k = np.asarray(gt.keypoint_map).reshape(pred.o_k.shape)
    target_r = np.asarray(gt.region_mask).reshape(pred.o_r.shape)
    loss = F.bce_loss(pred.o_k, target_k)
    if lambda1:
        loss = loss + F.bce_loss(pred.o_r, target_r) * lambda1
    return loss


# ------------------ DEBUG DUMP ------------------

def _write_pgm(path: Path, values: np.ndarray) -> None:
    pixels = np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    rows, cols = pixels.shape
    path.write_bytes(f"P5\n{cols} {rows}\n255\n".encode("ascii") + pixels.tobytes())


def dump_heatmaps_pgm(o_k, o_r, smoothed: Optional[np.ndarray], out_dir: str, tile_name: str) -> None:
    """8-bit greyscale PGM images of the predicted maps for visual inspection."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    maps = {"o_k": o_k, "o_r": o_r, "smoothed": smoothed}
    for label, values in maps.items():
        if values is None:
            continue
        _write_pgm(out / f"{tile_name}_{label}.pgm", as_map(values))
    logging.debug(f"Wrote heatmap dumps for {tile_name} to {out}")
