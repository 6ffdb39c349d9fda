"""The L-stage convolutional feature extractor shared by classifier and saliency encoder."""
from __future__ import annotations

import torch
from torch import nn

DEFAULT_WIDTHS = (16, 32, 32, 64, 64)
DEFAULT_STRIDES = (1, 2, 2, 2, 1)


class Backbone(nn.Module):
    """Plain CNN; each stage is conv3x3 -> BN -> ReLU and its output is a modulation point."""

    arch_id = "cnn5"

    def __init__(self, in_channels: int = 3, widths=DEFAULT_WIDTHS, strides=DEFAULT_STRIDES, norm: bool = True):
        super().__init__()
        if len(widths) != len(strides):
            raise ValueError("widths and strides must have the same length")
        self.in_channels = in_channels
        self.widths = tuple(widths)
        self.strides = tuple(strides)
        self.norm = norm
        stages = []
        c_in = in_channels
        for w, s in zip(widths, strides):
            if norm:
                stages.append(nn.Sequential(nn.Conv2d(c_in, w, 3, s, 1, bias=False), nn.BatchNorm2d(w), nn.ReLU()))
            else:
                stages.append(nn.Sequential(nn.Conv2d(c_in, w, 3, s, 1), nn.ReLU()))
            c_in = w
        self.stages = nn.ModuleList(stages)

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    @property
    def out_channels(self) -> int:
        return self.widths[-1]

    @staticmethod
    def normalize(x: torch.Tensor) -> torch.Tensor:
        return (x - 0.5) / 0.25

    def forward(self, x: torch.Tensor) -> list:
        feats = []
        z = self.normalize(x)
        for stage in self.stages:
            z = stage(z)
            feats.append(z)
        return feats

    def stage_shapes(self, image_size) -> list:
        H, W = image_size
        shapes = []
        for w, s in zip(self.widths, self.strides):
            H, W = (H - 1) // s + 1, (W - 1) // s + 1
            shapes.append((w, H, W))
        return shapes

    def load_from(self, other: "Backbone") -> None:
        """Copy weights from a twin; a wider stem gets zero weights for the extra channels."""
        src = other.state_dict()
        dst = self.state_dict()
        for k, v in src.items():
            if dst[k].shape == v.shape:
                dst[k] = v.clone()
            elif k == "stages.0.0.weight" and dst[k].shape[1] > v.shape[1]:
                w = torch.zeros_like(dst[k])
                w[:, : v.shape[1]] = v
                dst[k] = w
            else:
                raise ValueError(f"cannot copy {k}: {tuple(v.shape)} -> {tuple(dst[k].shape)}")
        self.load_state_dict(dst)
