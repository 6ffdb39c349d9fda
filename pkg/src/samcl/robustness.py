"""PGD adversarial evaluation and the spurious-feature experiment."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from samcl.config import ExperimentConfig, with_settings
from samcl.datastream import stack_samples
from samcl.harness import build_stream, evaluate, final_average, train_online

log = logging.getLogger("samcl")


@dataclass
class AttackConfig:
    epsilon: float  # L-inf budget in [0,1] pixel units
    steps: int = 10
    step_size: Optional[float] = None  # None -> 2.5 * epsilon / steps
    random_start: bool = True

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.step_size is None:
            self.step_size = 2.5 * self.epsilon / self.steps
        if self.epsilon > 0 and self.step_size <= 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")


def _logits(model, x):
    out = model.logits(x) if hasattr(model, "logits") else model(x)
    return out.logits if hasattr(out, "logits") else out


def pgd_attack(
    model,
    images: torch.Tensor,
    labels: torch.Tensor,
    cfg: AttackConfig,
    generator: Optional[torch.Generator] = None,
    callback: Optional[Callable[[int, torch.Tensor], None]] = None,
) -> torch.Tensor:
    """Untargeted L-inf PGD in [0,1] pixel space over the model's full forward.

    ``callback(step, x_adv)`` sees every projected iterate.
    """
    x0 = images.detach()
    if cfg.epsilon == 0:
        return x0.clone()
    eps = cfg.epsilon
    x = x0.clone()
    if cfg.random_start:
        noise = torch.rand(x0.shape, generator=generator, dtype=x0.dtype) * 2 * eps - eps
        x = torch.clamp(x0 + noise, 0.0, 1.0)
    for step in range(cfg.steps):
        x.requires_grad_(True)
        loss = F.cross_entropy(_logits(model, x), labels)
        if not loss.requires_grad:
            raise RuntimeError("model output does not depend differentiably on its input")
        (grad,) = torch.autograd.grad(loss, x)
        with torch.no_grad():
            x = x + cfg.step_size * grad.sign()
            x = torch.min(torch.max(x, x0 - eps), x0 + eps).clamp(0.0, 1.0)
        x = x.detach()
        if callback is not None:
            callback(step, x)
    return x


def attacked_accuracy(model, images: np.ndarray, labels: np.ndarray, cfg: AttackConfig,
                      seed: int = 0, batch_size: int = 128) -> float:
    was_training = getattr(model, "training", False)
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    correct = 0
    for i in range(0, len(images), batch_size):
        x = torch.from_numpy(images[i:i + batch_size])
        y = torch.from_numpy(labels[i:i + batch_size])
        x_adv = pgd_attack(model, x, y, cfg, gen)
        with torch.no_grad():
            correct += int((_logits(model, x_adv).argmax(dim=1) == y).sum())
    if was_training:
        model.train()
    return correct / len(images)


def robustness_curve(model, stream, epsilons, seed: int = 0, steps: int = 10,
                     step_size: Optional[float] = None, random_start: bool = True) -> list:
    """(epsilon, seed, accuracy) per budget; accuracy is the Class-IL final average over tasks.

    Epsilons are in [0,1] pixel units. Epsilon 0 goes through the clean
    evaluation path, so that point is exactly the clean accuracy.
    """
    eps_list = [float(e) for e in epsilons]
    if eps_list != sorted(eps_list):
        raise ValueError("epsilons must be sorted ascending")
    rows = []
    for eps in eps_list:
        if eps == 0:
            acc = evaluate(model, stream, "class-il").average
        else:
            cfg = AttackConfig(eps, steps, step_size or None, random_start)
            per_task = []
            for task in stream.tasks:
                images, labels, _ = stack_samples(task.test)
                per_task.append(attacked_accuracy(model, images, labels, cfg, seed))
            acc = final_average(per_task)
        rows.append((eps, seed, acc))
    return rows


def write_curve_csv(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epsilon", "seed", "accuracy"])
        for eps, seed, acc in rows:
            w.writerow([repr(float(eps)), int(seed), repr(float(acc))])


def read_curve_csv(path) -> list:
    with Path(path).open(encoding="utf-8") as fh:
        return [(float(r["epsilon"]), int(r["seed"]), float(r["accuracy"])) for r in csv.DictReader(fh)]


SPURIOUS_ARMS = ("clean", "spurious", "spurious+sam")


def spurious_configs(base: ExperimentConfig, scale: float = 5.0) -> dict:
    """The three arms on a 10-class, five 2-way task benchmark."""
    common = {"benchmark.num_classes": 10, "benchmark.num_tasks": 5, "benchmark.classes_per_task": 2}
    return {
        "clean": with_settings(base, **common, **{"benchmark.spurious_scale": 0.0, "sam.variant": "none",
                                                  "name": "clean"}),
        "spurious": with_settings(base, **common, **{"benchmark.spurious_scale": scale, "sam.variant": "none",
                                                     "name": "spurious"}),
        "spurious+sam": with_settings(base, **common, **{"benchmark.spurious_scale": scale, "sam.variant": "sam",
                                                         "name": "spurious+sam"}),
    }


def spurious_experiment(base: ExperimentConfig, seed: int, scale: float = 5.0) -> dict:
    """Final-task result record per arm; every arm is evaluated on the unaltered test sets."""
    rows = {}
    for arm, cfg in spurious_configs(base, scale).items():
        stream = build_stream(cfg, seed)
        rows[arm] = train_online(cfg, stream, seed, experiment="spurious").records[-1]
        log.info("spurious arm=%s seed=%d class-il=%.4f", arm, seed, rows[arm].class_il)
    return rows
