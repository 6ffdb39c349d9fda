"""Saliency predictor S = D(E(x)), its KL objective, pretraining and metrics."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from samcl.backbone import Backbone
from samcl.datastream import ImageCollection, Sample, TaskStream, stack_samples
from samcl.errors import ConfigError

DEFAULT_EPS = 1e-8


def _normalize(m: torch.Tensor, what: str) -> torch.Tensor:
    total = m.sum(dim=(-2, -1), keepdim=True)
    if torch.any(total <= 0):
        raise ValueError(f"{what} map has non-positive sum; cannot normalize to a distribution")
    return m / total


def kld_loss(predicted, target, eps: float = DEFAULT_EPS, reduction: str = "mean") -> torch.Tensor:
    """sum_i s_i * log(s_i / (S_i + eps) + eps) over pixels, on sum-normalized maps.

    Accepts (H, W) or (B, H, W); batched input is reduced with ``reduction``
    ("mean", "sum" or "none").
    """
    predicted = torch.as_tensor(predicted)
    target = torch.as_tensor(target, dtype=predicted.dtype)
    if predicted.shape != target.shape:
        raise ValueError(f"shape mismatch: predicted {tuple(predicted.shape)} vs target {tuple(target.shape)}")
    q = _normalize(predicted, "predicted")
    p = _normalize(target, "target")
    pos = p > 0
    # zero-mass target cells contribute exactly 0; keep their log argument finite
    inner = torch.where(pos, p / (q + eps) + eps, torch.ones_like(p))
    per_map = (p * torch.log(inner)).sum(dim=(-2, -1))
    if per_map.dim() == 0 or reduction == "none":
        return per_map
    if reduction == "sum":
        return per_map.sum()
    return per_map.mean()


@dataclass(frozen=True)
class SaliencyMetrics:
    cc: float
    sim: float
    kld: float
    cc_defined: bool = True


def saliency_metrics(predicted, target, eps: float = DEFAULT_EPS) -> SaliencyMetrics:
    """CC, Sim and KLD between two maps.

    CC is undefined for a constant map; it is then reported as NaN with
    ``cc_defined=False``.
    """
    p = np.asarray(predicted, dtype=np.float64)
    q = np.asarray(target, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: predicted {p.shape} vs target {q.shape}")
    if q.sum() <= 0:
        raise ValueError("target map has non-positive sum")
    if p.sum() <= 0:
        raise ValueError("predicted map has non-positive sum")
    pn, qn = p / p.sum(), q / q.sum()
    sim = float(np.minimum(pn, qn).sum())
    kld = float(kld_loss(torch.from_numpy(p), torch.from_numpy(q), eps))
    if p.std() == 0 or q.std() == 0:
        return SaliencyMetrics(float("nan"), sim, kld, cc_defined=False)
    cc = float(np.corrcoef(p.ravel(), q.ravel())[0, 1])
    return SaliencyMetrics(float(np.clip(cc, -1.0, 1.0)), sim, kld)


def mean_metrics(rows: Sequence[SaliencyMetrics]) -> SaliencyMetrics:
    ccs = [r.cc for r in rows if r.cc_defined]
    return SaliencyMetrics(
        float(np.mean(ccs)) if ccs else float("nan"),
        float(np.mean([r.sim for r in rows])),
        float(np.mean([r.kld for r in rows])),
        cc_defined=bool(ccs),
    )


class SaliencyDecoder(nn.Module):
    """Lightweight upsampling head over the deepest encoder features."""

    def __init__(self, in_channels: int = 64, hidden=(32, 16)):
        super().__init__()
        blocks = []
        c = in_channels
        for h in hidden:
            blocks.append(nn.Conv2d(c, h, 3, 1, 1))
            c = h
        self.blocks = nn.ModuleList(blocks)
        self.out = nn.Conv2d(c, 1, 3, 1, 1)

    def forward(self, z: torch.Tensor, out_size) -> torch.Tensor:
        h = z
        for conv in self.blocks:
            h = F.relu(conv(h))
            h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
        h = F.interpolate(self.out(h), size=tuple(out_size), mode="bilinear", align_corners=False)
        B = h.shape[0]
        # spatial softmax: non-negative map summing to one
        return F.softmax(h.reshape(B, -1), dim=1).reshape(B, *out_size)


class SaliencyPredictor(nn.Module):
    arch_id = "cnn5-upsample-decoder"

    def __init__(self, image_size=(32, 32), encoder: Optional[Backbone] = None):
        super().__init__()
        self.image_size = tuple(image_size)
        self.encoder = encoder if encoder is not None else Backbone()
        self.decoder = SaliencyDecoder(self.encoder.out_channels)

    def forward(self, x: torch.Tensor):
        """Return (maps (B, H, W), encoder stage features)."""
        feats = self.encoder(x)
        return self.decoder(feats[-1], x.shape[-2:]), feats

    def _check_size(self, x: torch.Tensor) -> None:
        if tuple(x.shape[-2:]) != self.image_size:
            raise ValueError(f"image size {tuple(x.shape[-2:])} does not match predictor input {self.image_size}")

    @torch.no_grad()
    def predict(self, images: torch.Tensor):
        """Eval-mode forward for NCHW (or CHW) images, size-checked."""
        single = images.dim() == 3
        if single:
            images = images.unsqueeze(0)
        self._check_size(images)
        was_training = self.training
        self.eval()
        maps, feats = self(images)
        self.train(was_training)
        if single:
            return maps[0], [f[0] for f in feats]
        return maps, feats

    def predict_map(self, image: np.ndarray) -> np.ndarray:
        x = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1), dtype=np.float32))
        return self.predict(x)[0].numpy()


def _as_arrays(data):
    if isinstance(data, ImageCollection):
        images = np.ascontiguousarray(data.images.transpose(0, 3, 1, 2), dtype=np.float32)
        return images, data.labels, data.saliency
    return stack_samples(list(data))


@torch.no_grad()
def mean_kld(S: SaliencyPredictor, images: np.ndarray, targets: np.ndarray, batch_size: int = 256) -> float:
    total = 0.0
    for i in range(0, len(images), batch_size):
        maps, _ = S.predict(torch.from_numpy(images[i:i + batch_size]))
        total += float(kld_loss(maps, torch.from_numpy(targets[i:i + batch_size]), reduction="sum"))
    return total / len(images)


def pretrain_saliency(
    S: SaliencyPredictor,
    pretrain_set,
    epochs: int = 5,
    lr: float = 0.03,
    batch_size: int = 16,
    momentum: float = 0.9,
    seed: int = 0,
    heldout_fraction: float = 0.1,
    benchmark_classes=None,
    history: Optional[list] = None,
) -> SaliencyPredictor:
    """Train S with the KL objective only; class labels are used solely for the contamination guard.

    ``history`` (if given) receives the held-out mean KLD before training and
    after each epoch.
    """
    if len(pretrain_set) == 0:
        raise ConfigError("pretraining set is empty")
    images, labels, sal = _as_arrays(pretrain_set)
    if sal is None:
        raise ConfigError("pretraining samples need saliency targets")
    if benchmark_classes is not None:
        overlap = set(int(c) for c in np.unique(labels)) & set(int(c) for c in benchmark_classes)
        if overlap:
            raise ConfigError(f"pretraining classes overlap the benchmark classes: {sorted(overlap)}")
    if epochs <= 0:
        return S
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(images))
    n_held = int(round(len(images) * heldout_fraction))
    held, train = perm[:n_held], perm[n_held:]
    if history is not None and n_held:
        history.append(mean_kld(S, images[held], sal[held]))
    opt = torch.optim.SGD(S.parameters(), lr=lr, momentum=momentum)
    gen = torch.Generator().manual_seed(seed)
    S.train()
    for _ in range(epochs):
        order = train[torch.randperm(len(train), generator=gen).numpy()]
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            maps, _ = S(torch.from_numpy(images[idx]))
            loss = kld_loss(maps, torch.from_numpy(sal[idx]))
            opt.zero_grad()
            loss.backward()
            opt.step()
        if history is not None and n_held:
            history.append(mean_kld(S, images[held], sal[held]))
    return S


@torch.no_grad()
def evaluate_saliency(S: SaliencyPredictor, samples) -> SaliencyMetrics:
    images, _, sal = _as_arrays(samples)
    rows = []
    for i in range(0, len(images), 256):
        maps, _ = S.predict(torch.from_numpy(images[i:i + 256]))
        rows.extend(saliency_metrics(m, t) for m, t in zip(maps.numpy(), sal[i:i + 256]))
    return mean_metrics(rows)


def track_saliency_over_tasks(
    S: SaliencyPredictor,
    stream: TaskStream,
    eval_set,
    train: bool = True,
    lr: float = 0.03,
    batch_size: int = 8,
    seed: int = 0,
) -> list:
    """Train S online on the KL objective task by task; evaluate after each task."""
    rows = []
    opt = torch.optim.SGD(S.parameters(), lr=lr) if train else None
    for task in stream.tasks:
        if train:
            S.train()
            images, _, sal = stack_samples(task.train)
            for i in range(0, len(images), batch_size):
                maps, _ = S(torch.from_numpy(images[i:i + batch_size]))
                loss = kld_loss(maps, torch.from_numpy(sal[i:i + batch_size]))
                opt.zero_grad()
                loss.backward()
                opt.step()
        rows.append(evaluate_saliency(S, eval_set))
    return rows


# --- checkpoints ----------------------------------------------------------

def save_checkpoint(module: nn.Module, path, **manifest) -> Path:
    """Write ``path`` (state dict blob) and ``path.manifest`` (key=value text)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(module.state_dict(), path)
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    manifest = {"arch": getattr(module, "arch_id", type(module).__name__), **manifest, "sha256": digest}
    text = "".join(f"{k}={v}\n" for k, v in manifest.items())
    Path(str(path) + ".manifest").write_text(text, encoding="utf-8")
    return path


def read_manifest_file(path) -> dict:
    out = {}
    for line in Path(str(path) + ".manifest").read_text(encoding="utf-8").splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k] = v
    return out


def load_checkpoint(module: nn.Module, path) -> dict:
    path = Path(path)
    manifest = read_manifest_file(path)
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    if manifest.get("sha256") != digest:
        raise ValueError(f"{path}: content hash does not match its manifest")
    module.load_state_dict(torch.load(path, weights_only=True))
    return manifest

