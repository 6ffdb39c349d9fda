"""Saliency-driven modulation of a classifier by a same-architecture saliency encoder.

At every enabled modulation point i the classifier's stage-i output is
multiplied elementwise by the encoder's stage-i output before it feeds the
next stage (or the head). Encoder features enter the classifier detached, so
the classification loss never reaches encoder parameters.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import nn

from samcl.backbone import Backbone
from samcl.errors import ConfigError, GradientLeakError
from samcl.saliency import SaliencyPredictor

VARIANTS = ("none", "sam", "sim", "sai", "lsm")


@dataclass(frozen=True)
class ModulationScheme:
    mask: tuple

    @classmethod
    def parse(cls, value, length: int = 5) -> "ModulationScheme":
        if isinstance(value, ModulationScheme):
            value = value.mask
        if isinstance(value, str):
            if any(ch not in "01" for ch in value):
                raise ConfigError(f"scheme {value!r} must contain only 0/1 characters")
            bits = tuple(int(ch) for ch in value)
        else:
            bits = tuple(int(b) for b in value)
            if any(b not in (0, 1) for b in bits):
                raise ConfigError(f"scheme {value!r} must contain only 0/1 entries")
        if len(bits) != length:
            raise ConfigError(f"scheme {value!r} has length {len(bits)}; it must have exactly {length} entries")
        return cls(bits)

    def __str__(self) -> str:
        return "".join(str(b) for b in self.mask)

    @property
    def enabled(self) -> bool:
        return any(self.mask)


@dataclass
class ModelOutput:
    logits: torch.Tensor
    saliency: Optional[torch.Tensor]
    features: list


def _peak_normalize(smap: torch.Tensor) -> torch.Tensor:
    return smap / smap.amax(dim=(-2, -1), keepdim=True).clamp_min(1e-12)


class ModulatedBackbone(nn.Module):
    """Classifier C + linear head, paired with a saliency predictor S = D(E(x)).

    ``variant`` selects how saliency enters the classifier:
      none -- plain classifier (S may still run for its own loss);
      sam  -- multiplicative feature modulation at the scheme's points;
      sim  -- input image multiplied by the peak-normalized saliency map;
      sai  -- saliency map appended as a fourth input channel;
      lsm  -- learned 1x1 fusion of concatenated classifier/encoder features.
    """

    def __init__(
        self,
        num_classes: int,
        image_size=(32, 32),
        variant: str = "sam",
        scheme="11111",
        saliency: Optional[SaliencyPredictor] = None,
        classifier: Optional[Backbone] = None,
        lsm_init: str = "identity",
    ):
        super().__init__()
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.variant = variant
        self.image_size = tuple(image_size)
        self.saliency = saliency if saliency is not None else SaliencyPredictor(image_size)
        encoder = self.saliency.encoder
        if classifier is None:
            classifier = Backbone(4 if variant == "sai" else 3, encoder.widths, encoder.strides, encoder.norm)
        if variant == "sai" and classifier.in_channels != 4:
            raise ConfigError("SAI needs a classifier stem with 4 input channels (RGB + saliency)")
        if variant != "sai" and classifier.in_channels != 3:
            raise ConfigError(f"variant {variant!r} needs a 3-channel classifier stem")
        if classifier.stage_shapes(self.image_size) != encoder.stage_shapes(self.image_size):
            raise ConfigError("classifier and saliency encoder stage shapes differ; they must be architectural twins")
        self.classifier = classifier
        self.head = nn.Linear(classifier.out_channels, num_classes)
        self.num_classes = num_classes
        if variant == "lsm":
            self.fusion = nn.ModuleList(nn.Conv2d(2 * w, w, 1) for w in classifier.widths)
            if lsm_init == "identity":
                self.init_fusion_identity()
        else:
            self.fusion = None
        self.scheme = ModulationScheme.parse(scheme, classifier.num_stages)
        self.saliency_frozen = False

    def train(self, mode: bool = True) -> "ModulatedBackbone":
        super().train(mode)
        if self.saliency_frozen:
            # a frozen predictor must not drift through BN running statistics
            self.saliency.eval()
        return self

    @property
    def num_points(self) -> int:
        return self.classifier.num_stages

    def set_scheme(self, scheme) -> "ModulatedBackbone":
        self.scheme = ModulationScheme.parse(scheme, self.num_points)
        return self

    @torch.no_grad()
    def init_fusion_identity(self) -> None:
        """Fusion weights that pass classifier features through and ignore saliency features."""
        for conv, w in zip(self.fusion, self.classifier.widths):
            conv.weight.zero_()
            conv.bias.zero_()
            conv.weight[:, :w, 0, 0] = torch.eye(w)

    @property
    def uses_feature_modulation(self) -> bool:
        return self.variant in ("sam", "lsm") and self.scheme.enabled

    @property
    def needs_saliency_at_inference(self) -> bool:
        return self.uses_feature_modulation or self.variant in ("sim", "sai")

    def classifier_parameters(self):
        yield from self.classifier.parameters()
        yield from self.head.parameters()
        if self.fusion is not None:
            yield from self.fusion.parameters()

    def forward(
        self,
        x: torch.Tensor,
        compute_saliency: bool = False,
        saliency_features: Optional[Sequence[torch.Tensor]] = None,
        saliency_map: Optional[torch.Tensor] = None,
    ) -> ModelOutput:
        """Run S (when needed) and the classifier.

        ``saliency_features`` / ``saliency_map`` override what S would supply
        to the classifier; S still runs for the returned map if requested.
        """
        smap, sfeats = None, None
        if compute_saliency or self.needs_saliency_at_inference:
            smap, sfeats = self.saliency(x)
        if saliency_features is not None:
            sfeats = list(saliency_features)
        cmap = saliency_map if saliency_map is not None else smap

        if self.variant == "sim":
            xc = x * _peak_normalize(cmap.detach()).unsqueeze(1)
        elif self.variant == "sai":
            xc = torch.cat([x, _peak_normalize(cmap.detach()).unsqueeze(1)], dim=1)
        else:
            xc = x

        feats = []
        z = self.classifier.normalize(xc)
        for i, stage in enumerate(self.classifier.stages):
            z = stage(z)
            if self.variant in ("sam", "lsm") and self.scheme.mask[i]:
                zs = sfeats[i].detach()
                if zs.shape != z.shape:
                    raise ValueError(
                        f"modulation point {i + 1}: classifier features {tuple(z.shape)} "
                        f"vs saliency features {tuple(zs.shape)}"
                    )
                z = z * zs if self.variant == "sam" else self.fusion[i](torch.cat([z, zs], dim=1))
            feats.append(z)
        logits = self.head(z.mean(dim=(2, 3)))
        return ModelOutput(logits, smap, feats)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward(x).logits


def set_scheme(backbone: ModulatedBackbone, mask) -> ModulatedBackbone:
    return backbone.set_scheme(mask)


def stop_gradient_guard(model: ModulatedBackbone, classification_loss: torch.Tensor, strict: bool = True) -> dict:
    """Gradients of the classification loss for every named parameter.

    With ``strict``, any non-zero gradient on a saliency-encoder parameter
    raises :class:`GradientLeakError`.
    """
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    grads = torch.autograd.grad(
        classification_loss, [p for _, p in named], retain_graph=True, allow_unused=True
    )
    out = {n: (torch.zeros_like(p) if g is None else g) for (n, p), g in zip(named, grads)}
    if strict:
        for n, g in out.items():
            if n.startswith("saliency.encoder.") and torch.any(g != 0):
                raise GradientLeakError(f"classification loss reached encoder parameter {n}")
    return out
