"""Lightweight 3D UNet mapping observation voxels to the shared feature volume."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor
from .voxelizer import N_CHANNELS


@dataclass
class EncoderConfig:
    in_channels: int = N_CHANNELS
    widths: tuple = (8, 16, 32, 64)
    out_channels: int = 32
    kernel: int = 3
    leak: float = 0.02

    @classmethod
    def full_scale(cls) -> "EncoderConfig":
        return cls(out_channels=128)


@dataclass
class FeatureVolume:
    data: Tensor  # (B, N, N, N, C_v)
    bounds: tuple


class ConvBlock(nn.Module):
    """conv -> instance norm -> leaky relu"""

    def __init__(self, c_in, c_out, kernel, rng, stride=1, leak=0.02):
        super().__init__()
        self.leak = leak
        self.conv = nn.Conv3d(c_in, c_out, kernel, rng, stride=stride)
        self.norm = nn.InstanceNorm3d(c_out)

    def forward(self, x):
        return T.leaky_relu(self.norm(self.conv(x)), self.leak)


class UpBlock(nn.Module):
    """trilinear resize to a target extent, then a conv block"""

    def __init__(self, c_in, c_out, kernel, rng, leak=0.02):
        super().__init__()
        self.block = ConvBlock(c_in, c_out, kernel, rng, leak=leak)

    def forward(self, x, size):
        return self.block(T.resize_trilinear(x, size))


class VoxelEncoder(nn.Module):
    def __init__(self, config: EncoderConfig | None = None, rng: np.random.Generator | None = None):
        super().__init__()
        cfg = config or EncoderConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = cfg
        w0, w1, w2, w3 = cfg.widths
        k, leak = cfg.kernel, cfg.leak
        self.conv0 = ConvBlock(cfg.in_channels, w0, k, rng, leak=leak)
        self.conv1 = ConvBlock(w0, w1, k, rng, stride=2, leak=leak)
        self.conv2 = ConvBlock(w1, w1, k, rng, leak=leak)
        self.conv3 = ConvBlock(w1, w2, k, rng, stride=2, leak=leak)
        self.conv4 = ConvBlock(w2, w2, k, rng, leak=leak)
        self.conv5 = ConvBlock(w2, w3, k, rng, stride=2, leak=leak)
        self.conv6 = ConvBlock(w3, w3, k, rng, leak=leak)
        self.conv7 = UpBlock(w3, w2, k, rng, leak=leak)
        self.conv9 = UpBlock(w2, w1, k, rng, leak=leak)
        self.conv11 = UpBlock(w1, w0, k, rng, leak=leak)
        self.conv_out = nn.Conv3d(w0, cfg.out_channels, k, rng)

    def forward(self, x: Tensor) -> Tensor:
        """(B, N, N, N, 10) -> (B, N, N, N, C_v)"""
        if x.ndim != 5 or x.shape[-1] != self.config.in_channels:
            raise T.ShapeError(f"encoder expects (B, N, N, N, {self.config.in_channels}) input, got {x.shape}")
        conv0 = self.conv0(x)
        conv2 = self.conv2(self.conv1(conv0))
        conv4 = self.conv4(self.conv3(conv2))
        h = self.conv6(self.conv5(conv4))
        h = conv4 + self.conv7(h, conv4.shape[1:4])
        h = conv2 + self.conv9(h, conv2.shape[1:4])
        return self.conv_out(conv0 + self.conv11(h, conv0.shape[1:4]))

    def stage_shapes(self, x: Tensor) -> dict[str, tuple]:
        """Forward pass that records every stage's output extents."""
        shapes = {"input": x.shape}
        conv0 = self.conv0(x)
        shapes["conv0"] = conv0.shape
        conv2 = self.conv2(self.conv1(conv0))
        shapes["conv2"] = conv2.shape
        conv4 = self.conv4(self.conv3(conv2))
        shapes["conv4"] = conv4.shape
        h = self.conv6(self.conv5(conv4))
        shapes["conv6"] = h.shape
        h = conv4 + self.conv7(h, conv4.shape[1:4])
        shapes["conv7"] = h.shape
        h = conv2 + self.conv9(h, conv2.shape[1:4])
        shapes["conv9"] = h.shape
        h = conv0 + self.conv11(h, conv0.shape[1:4])
        shapes["conv11"] = h.shape
        out = self.conv_out(h)
        shapes["conv_out"] = out.shape
        return shapes


def encode(encoder: VoxelEncoder, obs, bounds=None) -> FeatureVolume:
    """Encode one ObservationVoxel or a stacked (B, N, N, N, 10) array."""
    grid = getattr(obs, "grid", obs)
    bounds = getattr(obs, "bounds", bounds)
    arr = np.asarray(grid.data if isinstance(grid, Tensor) else grid)
    if arr.shape[-1] != encoder.config.in_channels:
        raise T.ShapeError(f"observation must have {encoder.config.in_channels} channels, got {arr.shape[-1]}")
    if arr.ndim == 4:
        arr = arr[None]
    dtype = encoder.conv_out.weight.dtype
    return FeatureVolume(encoder(T.Tensor(arr.astype(dtype))), bounds)


def parameter_count(config: EncoderConfig | None = None) -> int:
    """Trainable scalars of :class:`VoxelEncoder` for ``config``, counted from layer shapes."""
    cfg = config or EncoderConfig()
    w0, w1, w2, w3 = cfg.widths
    k = cfg.kernel

    def block(c_in, c_out):
        return nn.count_conv(c_in, c_out, k) + 2 * c_out

    return (block(cfg.in_channels, w0) + block(w0, w1) + block(w1, w1) + block(w1, w2) + block(w2, w2)
            + block(w2, w3) + block(w3, w3) + block(w3, w2) + block(w2, w1) + block(w1, w0)
            + nn.count_conv(w0, cfg.out_channels, k))
