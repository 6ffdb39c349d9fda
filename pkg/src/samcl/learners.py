"""Continual-learning strategies that supply the classification loss, plus the replay buffer."""
from __future__ import annotations

import copy
import random
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from samcl.errors import ConfigError

LEARNERS = ("finetune", "joint", "derpp", "erace", "lwf", "oewc")
REHEARSAL = ("derpp", "erace")


@dataclass
class BufferItem:
    image: np.ndarray  # (C, H, W)
    label: int
    logits: Optional[np.ndarray] = None
    saliency: Optional[np.ndarray] = None
    task_id: int = 0


class MemoryBuffer:
    """Fixed-capacity reservoir of past stream items."""

    def __init__(self, capacity: int, seed: int = 0):
        if capacity < 0:
            raise ConfigError(f"buffer capacity must be >= 0, got {capacity}")
        self.capacity = capacity
        self.entries: list = []
        self.seen_count = 0
        self._rng = random.Random(seed)

    def __len__(self) -> int:
        return len(self.entries)

    def is_empty(self) -> bool:
        return not self.entries

    def insert(self, item) -> int:
        """Reservoir step; returns the slot written, or -1 if the item was dropped."""
        self.seen_count += 1
        if len(self.entries) < self.capacity:
            self.entries.append(item)
            return len(self.entries) - 1
        if self.capacity == 0:
            return -1
        j = self._rng.randrange(self.seen_count)
        if j < self.capacity:
            self.entries[j] = item
            return j
        return -1

    def sample(self, k: int) -> list:
        """Draw ``k`` entries uniformly with replacement."""
        if not self.entries or k <= 0:
            return []
        return self._rng.choices(self.entries, k=k)

    def save(self, path) -> None:
        """Dataset manifest (+ .npy images) and a little-endian float32 logits sidecar."""
        from samcl.datastream import Sample, write_manifest

        path = Path(path)
        samples = [
            Sample(e.image.transpose(1, 2, 0), e.label, e.saliency, e.task_id, f"buf_{i:06d}")
            for i, e in enumerate(self.entries)
        ]
        write_manifest(path, samples)
        rows = [e.logits for e in self.entries if e.logits is not None]
        if rows:
            if len(rows) != len(self.entries):
                raise ValueError("either all or no buffer entries must carry logits")
            arr = np.stack(rows).astype("<f4")
            header = struct.pack("<II", arr.shape[1], arr.shape[0])
            Path(str(path) + ".logits").write_bytes(header + arr.tobytes())

    @classmethod
    def load(cls, path, capacity: Optional[int] = None) -> "MemoryBuffer":
        from samcl.datastream import read_manifest

        coll = read_manifest(path)
        logits = None
        side = Path(str(path) + ".logits")
        if side.exists():
            data = side.read_bytes()
            width, rows = struct.unpack("<II", data[:8])
            logits = np.frombuffer(data[8:], dtype="<f4").reshape(rows, width)
        buf = cls(capacity if capacity is not None else len(coll))
        for i in range(len(coll)):
            sal = None if coll.saliency is None else coll.saliency[i]
            buf.entries.append(BufferItem(
                coll.images[i].transpose(2, 0, 1).copy(), int(coll.labels[i]),
                None if logits is None else logits[i].copy(), sal,
            ))
        buf.seen_count = len(buf.entries)
        return buf


def reservoir_insert(buffer: MemoryBuffer, item) -> MemoryBuffer:
    buffer.insert(item)
    return buffer


def stack_items(items: list):
    images = torch.from_numpy(np.stack([e.image for e in items]))
    labels = torch.tensor([e.label for e in items], dtype=torch.long)
    logits = None
    if all(e.logits is not None for e in items):
        logits = torch.from_numpy(np.stack([e.logits for e in items]))
    return images, labels, logits


# --- losses ---------------------------------------------------------------

def derpp_loss(
    stream_logits, stream_labels,
    logits_a=None, stored_logits_a=None,
    logits_b=None, labels_b=None,
    alpha: float = 0.5, beta: float = 0.5,
) -> torch.Tensor:
    """CE(stream) + alpha * MSE(logits_a, stored_a) + beta * CE(batch b)."""
    loss = F.cross_entropy(stream_logits, stream_labels)
    if alpha and logits_a is not None and len(logits_a):
        if stored_logits_a is None:
            raise ValueError("DER++ replay batch has no stored logits but alpha > 0")
        loss = loss + alpha * F.mse_loss(logits_a, stored_logits_a)
    if beta and logits_b is not None and len(logits_b):
        loss = loss + beta * F.cross_entropy(logits_b, labels_b)
    return loss


def erace_stream_mask(num_classes: int, batch_classes, seen_classes, first_task: bool) -> torch.Tensor:
    """Boolean mask of stream logits to suppress: seen classes absent from the batch (after task 1)."""
    mask = torch.zeros(num_classes, dtype=torch.bool)
    if first_task:
        return mask
    present = set(int(c) for c in batch_classes)
    for c in seen_classes:
        if c not in present:
            mask[c] = True
    return mask


def erace_loss(
    stream_logits, stream_labels, replay_logits, replay_labels, seen_classes, first_task: bool = False
) -> torch.Tensor:
    """Asymmetric CE: masked stream term plus plain replay CE."""
    if not seen_classes:
        raise ValueError("ER-ACE needs a non-empty set of seen classes")
    mask = erace_stream_mask(stream_logits.shape[1], stream_labels.tolist(), seen_classes, first_task)
    masked = stream_logits.masked_fill(mask.to(stream_logits.device), torch.finfo(stream_logits.dtype).min)
    loss = F.cross_entropy(masked, stream_labels)
    if replay_logits is not None and len(replay_logits):
        loss = loss + F.cross_entropy(replay_logits, replay_labels)
    return loss


def lwf_loss(
    logits, labels, snapshot_logits=None, past_classes=(), temperature: float = 2.0, weight: float = 1.0
) -> torch.Tensor:
    """CE + weight * KL(softmax(old/T) || softmax(new/T)) over previously seen classes."""
    loss = F.cross_entropy(logits, labels)
    past = sorted(past_classes)
    if weight and snapshot_logits is not None and past:
        idx = torch.tensor(past, dtype=torch.long)
        old = F.log_softmax(snapshot_logits[:, idx] / temperature, dim=1)
        new = F.log_softmax(logits[:, idx] / temperature, dim=1)
        kl = (old.exp() * (old - new)).sum(dim=1).mean()
        loss = loss + weight * kl
    return loss


def oewc_penalty(params: dict, anchor: dict, fisher: dict, strength: float) -> torch.Tensor:
    """(strength / 2) * sum_k F_k (theta_k - theta*_k)^2."""
    total = torch.zeros(())
    if not anchor:
        return total
    for name, p in params.items():
        if p.shape != anchor[name].shape or p.shape != fisher[name].shape:
            raise ValueError(f"oEWC shape mismatch for {name}: {tuple(p.shape)}, "
                             f"{tuple(anchor[name].shape)}, {tuple(fisher[name].shape)}")
        total = total + (fisher[name] * (p - anchor[name]) ** 2).sum()
    return 0.5 * strength * total


def classifier_named_parameters(model) -> dict:
    return {n: p for n, p in model.named_parameters() if not n.startswith("saliency.")}


def diagonal_fisher(model, images: torch.Tensor, labels: torch.Tensor, params: Optional[dict] = None) -> dict:
    """Empirical Fisher diagonal: mean over samples of squared grad of log p(y|x)."""
    params = params if params is not None else classifier_named_parameters(model)
    names = list(params)
    fisher = {n: torch.zeros_like(p) for n, p in params.items()}
    logits_fn = model.logits if hasattr(model, "logits") else model
    was_training = getattr(model, "training", False)
    model.eval()  # per-sample passes must not touch BN running statistics
    for i in range(len(images)):
        logp = F.log_softmax(logits_fn(images[i:i + 1]), dim=1)[0, labels[i]]
        grads = torch.autograd.grad(logp, [params[n] for n in names], allow_unused=True)
        for n, g in zip(names, grads):
            if g is not None:
                fisher[n] += g.detach() ** 2
    if was_training:
        model.train()
    return {n: f / max(len(images), 1) for n, f in fisher.items()}


# --- strategies -----------------------------------------------------------

class Learner:
    kind = "finetune"
    rehearsal = False

    def __init__(self, num_classes: int, buffer_size: int = 0, replay_batch: int = 8, seed: int = 0, **hp):
        self.num_classes = num_classes
        self.replay_batch = replay_batch
        self.hp = hp
        self.seen_classes: set = set()
        self.past_classes: set = set()
        self.task = 0
        self.buffer = MemoryBuffer(buffer_size, seed) if self.rehearsal else None

    def begin_task(self, task_id: int, classes) -> None:
        self.task = task_id

    def classification_loss(self, model, logits, labels, images=None) -> torch.Tensor:
        """L_c for one stream batch; ``logits`` come from the caller's forward of ``images``."""
        self.seen_classes.update(int(c) for c in labels.tolist())
        return self._loss(model, logits, labels, images)

    def _loss(self, model, logits, labels, images):
        return F.cross_entropy(logits, labels)

    def after_step(self, images, labels, logits, saliency=None, task_id: int = 0) -> None:
        if self.buffer is None:
            return
        for i in range(len(labels)):
            self.buffer.insert(BufferItem(
                images[i].numpy().copy(), int(labels[i]),
                logits[i].detach().numpy().copy() if logits is not None else None,
                None if saliency is None else saliency[i].numpy().copy(), task_id,
            ))

    def end_task(self, model, task_images=None, task_labels=None) -> None:
        self.past_classes = set(self.seen_classes)


class FineTune(Learner):
    kind = "finetune"


class Joint(Learner):
    kind = "joint"


class DERpp(Learner):
    kind = "derpp"
    rehearsal = True

    def _loss(self, model, logits, labels, images):
        alpha = self.hp.get("alpha", 0.5)
        beta = self.hp.get("beta", 0.5)
        la = sa = lb = yb = None
        if not self.buffer.is_empty():
            if alpha:
                xa, _, sa = stack_items(self.buffer.sample(self.replay_batch))
                la = model.logits(xa)
            if beta:
                xb, yb, _ = stack_items(self.buffer.sample(self.replay_batch))
                lb = model.logits(xb)
        return derpp_loss(logits, labels, la, sa, lb, yb, alpha, beta)


class ERACE(Learner):
    kind = "erace"
    rehearsal = True

    def _loss(self, model, logits, labels, images):
        lr = yr = None
        first = not self.past_classes
        if not first and not self.buffer.is_empty():
            xr, yr, _ = stack_items(self.buffer.sample(self.replay_batch))
            lr = model.logits(xr)
        return erace_loss(logits, labels, lr, yr, self.seen_classes, first)


class LwF(Learner):
    kind = "lwf"

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self.snapshot = None

    def _loss(self, model, logits, labels, images):
        snap = None
        if self.snapshot is not None and images is not None:
            with torch.no_grad():
                snap = self.snapshot.logits(images)
        return lwf_loss(logits, labels, snap, self.past_classes,
                        self.hp.get("temperature", 2.0), self.hp.get("weight", 1.0))

    def end_task(self, model, task_images=None, task_labels=None):
        super().end_task(model)
        self.snapshot = copy.deepcopy(model)
        self.snapshot.eval()
        for p in self.snapshot.parameters():
            p.requires_grad_(False)


class OEWC(Learner):
    kind = "oewc"

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self.anchor: dict = {}
        self.fisher: dict = {}

    def _loss(self, model, logits, labels, images):
        loss = F.cross_entropy(logits, labels)
        strength = self.hp.get("strength", 100.0)
        if strength and self.anchor:
            loss = loss + oewc_penalty(classifier_named_parameters(model), self.anchor, self.fisher, strength)
        return loss

    def end_task(self, model, task_images=None, task_labels=None):
        super().end_task(model)
        if task_images is None or not len(task_images):
            return
        n = self.hp.get("fisher_samples", 200)
        new = diagonal_fisher(model, task_images[:n], task_labels[:n])
        gamma = self.hp.get("decay", 0.9)
        if self.fisher:
            self.fisher = {k: gamma * self.fisher[k] + new[k] for k in new}
        else:
            self.fisher = new
        self.anchor = {n: p.detach().clone() for n, p in classifier_named_parameters(model).items()}


_KINDS = {cls.kind: cls for cls in (FineTune, Joint, DERpp, ERACE, LwF, OEWC)}


def make_learner(kind: str, num_classes: int, buffer_size: int = 0, replay_batch: int = 8, seed: int = 0, **hp):
    if kind not in _KINDS:
        raise ConfigError(f"unknown learner {kind!r}; expected one of {LEARNERS}")
    return _KINDS[kind](num_classes, buffer_size, replay_batch, seed, **hp)


def end_task_hook(learner: Learner, model, task_images=None, task_labels=None) -> Learner:
    learner.end_task(model, task_images, task_labels)
    return learner
