"""Tiny 3-D conv backbone, box inflation, 3-D RoI-Align and global-context fusion."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tn
from .data import Box2D
from .tensor import Parameter, ShapeError, Tensor


@dataclass
class FeatureMap:
    values: Tensor  # C' x T' x H' x W' (or N x C' x T' x H' x W' for a batch)
    spatial_stride: int
    temporal_stride: int


@dataclass
class PersonFeature:
    values: Tensor  # C' x T' x h x w
    person_index: int


@dataclass(frozen=True)
class BackboneConfig:
    channels: tuple[int, ...] = (3, 16, 32, 64)
    spatial_stride: int = 2
    temporal_stride: int = 1
    bn_eps: float = 1e-5

    @property
    def out_channels(self) -> int:
        return self.channels[-1]

    @property
    def total_spatial_stride(self) -> int:
        return self.spatial_stride ** (len(self.channels) - 1)

    @property
    def total_temporal_stride(self) -> int:
        return self.temporal_stride ** (len(self.channels) - 1)


class Backbone:
    """Stack of conv3d(3x3x3) -> frozen batch-norm -> GELU blocks."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, prefix: str = "backbone"):
        self.cfg = cfg
        self.blocks = []
        for i, (cin, cout) in enumerate(zip(cfg.channels[:-1], cfg.channels[1:])):
            std = np.sqrt(2.0 / (cin * 27))
            p = f"{prefix}.block{i}"
            self.blocks.append({
                "weight": Parameter(rng.normal(0.0, std, size=(cout, cin, 3, 3, 3)), f"{p}.conv.weight"),
                # batch-norm statistics and affine terms never train
                "running_mean": Parameter(np.zeros(cout), f"{p}.bn.running_mean", frozen=True),
                "running_var": Parameter(np.ones(cout), f"{p}.bn.running_var", frozen=True),
                "gamma": Parameter(np.ones(cout), f"{p}.bn.weight", frozen=True),
                "beta": Parameter(np.full(cout, 0.05), f"{p}.bn.bias", frozen=True),
            })

    def parameters(self) -> list[Parameter]:
        return [p for b in self.blocks for p in b.values()]

    def always_frozen(self) -> set[str]:
        return {p.name for b in self.blocks for k, p in b.items() if k != "weight"}

    def __call__(self, frames) -> FeatureMap:
        return backbone_forward(self, frames)


def frozen_bn(x: Tensor, block: dict, eps: float) -> Tensor:
    scale = block["gamma"].data / np.sqrt(block["running_var"].data + eps)
    shift = block["beta"].data - block["running_mean"].data * scale
    shp = (1, -1, 1, 1, 1)
    xd_scale = scale.reshape(shp)
    return tn._make(x.data * xd_scale + shift.reshape(shp), (x,), lambda g: (g * xd_scale,))


def backbone_forward(backbone: Backbone, frames) -> FeatureMap:
    """Encode frames [C, T, H, W] (or a batch [N, C, T, H, W]) to a feature map."""
    x = frames if isinstance(frames, Tensor) else Tensor(frames)
    single = x.ndim == 4
    if single:
        x = tn.reshape(x, (1,) + x.shape)
    cfg = backbone.cfg
    _, _, T, H, W = x.shape
    ss, ts = cfg.total_spatial_stride, cfg.total_temporal_stride
    if H % ss or W % ss or T % ts:
        raise ShapeError(f"backbone: extents T={T} H={H} W={W} not divisible by strides t={ts} s={ss}")
    for block in backbone.blocks:
        x = tn.conv3d(x, block["weight"], stride=(cfg.temporal_stride, cfg.spatial_stride, cfg.spatial_stride))
        x = tn.gelu(frozen_bn(x, block, cfg.bn_eps))
    if single:
        x = tn.reshape(x, x.shape[1:])
    return FeatureMap(x, ss, ts)


def inflate_box(box: Box2D, t_out: int) -> list[Box2D]:
    if t_out < 1:
        raise ValueError("t_out must be >= 1")
    return [box] * t_out


def _axis_weights(lo: float, hi: float, size: int, n_bins: int, sampling_ratio: int) -> np.ndarray:
    """Bin-averaged bilinear weights [n_bins, size] along one axis.

    ``lo``/``hi`` are continuous feature coordinates with pixel centers at
    i + 0.5; sample positions are clamped into the valid index range.
    """
    m = np.zeros((n_bins, size))
    bin_size = (hi - lo) / n_bins
    for b in range(n_bins):
        for s in range(sampling_ratio):
            pos = lo + (b + (s + 0.5) / sampling_ratio) * bin_size - 0.5
            pos = min(max(pos, 0.0), size - 1.0)
            i0 = int(np.floor(pos))
            i1 = min(i0 + 1, size - 1)
            f = pos - i0
            m[b, i0] += 1.0 - f
            m[b, i1] += f
    return m / sampling_ratio


def roi_weight_matrix(box: Box2D, fh: int, fw: int, out_h: int, out_w: int, sampling_ratio: int) -> np.ndarray:
    """Linear map [out_h*out_w, fh*fw] taking one feature plane to its RoI-Align output."""
    my = _axis_weights(box.y1 * fh, box.y2 * fh, fh, out_h, sampling_ratio)
    mx = _axis_weights(box.x1 * fw, box.x2 * fw, fw, out_w, sampling_ratio)
    return np.kron(my, mx)


def roi_align_many(fmap_values: Tensor, boxes: Sequence[Box2D], out_h: int = 7, out_w: int = 7,
                   sampling_ratio: int = 2) -> Tensor:
    """RoI-Align every box on a C' x T' x H' x W' map; returns P x C' x T' x out_h x out_w."""
    if out_h < 1 or out_w < 1 or sampling_ratio < 1:
        raise ValueError("output resolution and sampling ratio must be positive")
    C, T, fh, fw = fmap_values.shape
    mats = np.concatenate([roi_weight_matrix(b, fh, fw, out_h, out_w, sampling_ratio) for b in boxes])
    flat = tn.reshape(fmap_values, (C * T, fh * fw))
    pooled = tn.matmul(flat, Tensor(mats.T))  # C*T x P*oh*ow
    pooled = tn.reshape(pooled, (C, T, len(boxes), out_h, out_w))
    return tn.transpose(pooled, (2, 0, 1, 3, 4))


def roi_align_3d(fmap: FeatureMap, box: Box2D, out_h: int = 7, out_w: int = 7, sampling_ratio: int = 2,
                 person_index: int = 0) -> PersonFeature:
    """Per-frame RoI-Align of the (temporally inflated) box."""
    vals = roi_align_many(fmap.values, [box], out_h, out_w, sampling_ratio)
    return PersonFeature(tn.reshape(vals, vals.shape[1:]), person_index)


class Fusion:
    """Concatenate pooled global context onto person features, then a 1x1x1 conv."""

    def __init__(self, channels: int, rng: np.random.Generator, prefix: str = "fuse"):
        w = np.zeros((channels, 2 * channels))
        w[:, :channels] = np.eye(channels)
        w[:, channels:] = rng.normal(0.0, 0.5 / np.sqrt(channels), size=(channels, channels))
        self.weight = Parameter(w, f"{prefix}.weight")
        self.bias = Parameter(np.zeros(channels), f"{prefix}.bias")

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def __call__(self, persons: Tensor, fmap_values: Tensor) -> Tensor:
        return fuse_many(persons, fmap_values, self.weight, self.bias)


def fuse_many(persons: Tensor, fmap_values: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """persons P x C' x T' x h x w, fmap C' x T' x H' x W' -> P x C' x T' x h x w.

    The 1x1x1 conv over [person; context] is split into its two column blocks;
    the context half is constant over (h, w) so it is applied once and broadcast.
    """
    P, C, T, h, w = persons.shape
    if fmap_values.shape[1] != T:
        raise ShapeError(f"fuse: person T'={T} vs feature map T'={fmap_values.shape[1]}")
    if weight.shape != (C, 2 * C):
        raise ShapeError(f"fuse: weight {weight.shape} for {C} channels")
    ctx = tn.reduce(fmap_values, (2, 3), "mean")  # C x T
    w_person = tn.slice_axis(weight, 0, C, axis=1)
    w_ctx = tn.slice_axis(weight, C, 2 * C, axis=1)
    ctx_out = tn.matmul(w_ctx, ctx)  # C x T
    x = tn.reshape(tn.transpose(persons, (1, 0, 2, 3, 4)), (C, P * T * h * w))
    y = tn.reshape(tn.matmul(w_person, x), (C, P, T, h * w))
    ctx_b = tn.broadcast_to(tn.reshape(ctx_out, (C, 1, T, 1)), (C, P, T, h * w))
    y = y + ctx_b
    y = tn.transpose(tn.reshape(y, (C, P, T, h, w)), (1, 2, 3, 4, 0))
    y = tn.add_bias(y, bias)
    return tn.transpose(y, (0, 4, 1, 2, 3))


def fuse_global(person: PersonFeature, fmap: FeatureMap, fusion: Fusion) -> PersonFeature:
    """Reference form: explicit channel concat followed by the pointwise conv."""
    C, T, h, w = person.values.shape
    if fmap.values.shape[1] != T:
        raise ShapeError(f"fuse: person T'={T} vs feature map T'={fmap.values.shape[1]}")
    ctx = tn.reduce(fmap.values, (2, 3), "mean")
    ctx = tn.broadcast_to(tn.reshape(ctx, (C, T, 1, 1)), (C, T, h, w))
    cat = tn.concat([person.values, ctx], axis=0)
    y = tn.matmul(fusion.weight, tn.reshape(cat, (2 * C, T * h * w)))
    y = tn.add_bias(tn.transpose(y, (1, 0)), fusion.bias)
    y = tn.reshape(tn.transpose(y, (1, 0)), (C, T, h, w))
    return PersonFeature(y, person.person_index)

