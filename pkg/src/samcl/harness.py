"""Online training loop, Class-IL / Task-IL evaluation and multi-seed orchestration."""
from __future__ import annotations

import dataclasses
import json
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from samcl.backbone import Backbone
from samcl.config import ExperimentConfig
from samcl.datastream import (
    TaskStream,
    build_split_benchmark,
    generate_shapes_dataset,
    inject_spurious_features,
    read_manifest,
    stack_samples,
)
from samcl.errors import ConfigError, OnlineConstraintError
from samcl.learners import Learner, make_learner
from samcl.modulation import ModulatedBackbone, stop_gradient_guard
from samcl.saliency import SaliencyPredictor, evaluate_saliency, kld_loss, pretrain_saliency

log = logging.getLogger("samcl")

SCHEMA_VERSION = 1


@dataclass
class ResultRecord:
    seed: int
    task_index: int
    label: str
    learner: str
    buffer: int
    variant: str
    scheme: str
    task_accuracies_class_il: list
    task_accuracies_task_il: list
    class_il: float
    task_il: float
    sal_cc: Optional[float] = None
    sal_sim: Optional[float] = None
    sal_kld: Optional[float] = None
    wall_clock: float = 0.0
    params_train: int = 0
    params_inference: int = 0
    experiment: str = ""
    schema: int = SCHEMA_VERSION

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


def write_records(path, records, append: bool = False) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a" if append else "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_records(path) -> list:
    out = []
    names = {f.name for f in dataclasses.fields(ResultRecord)}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        if row.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"unsupported record schema {row.get('schema')!r}")
        out.append(ResultRecord(**{k: v for k, v in row.items() if k in names}))
    return out


# --- evaluation -----------------------------------------------------------

@dataclass
class Evaluation:
    per_task: list
    average: float
    sizes: list = field(default_factory=list)


@torch.no_grad()
def _predict(model, images: np.ndarray, restrict=None, batch_size: int = 256) -> np.ndarray:
    logits_fn = model.logits if hasattr(model, "logits") else model
    preds = []
    for i in range(0, len(images), batch_size):
        logits = logits_fn(torch.from_numpy(images[i:i + batch_size]))
        if restrict is not None:
            keep = torch.full((logits.shape[1],), float("-inf"))
            keep[list(restrict)] = 0.0
            logits = logits + keep
        preds.append(logits.argmax(dim=1).numpy())
    return np.concatenate(preds)


def evaluate(model, stream: TaskStream, mode: str = "class-il", upto: Optional[int] = None) -> Evaluation:
    """Per-task test accuracy of ``model`` and their mean, over tasks 0..upto."""
    if mode not in ("class-il", "task-il"):
        raise ValueError(f"mode must be 'class-il' or 'task-il', got {mode!r}")
    last = stream.num_tasks - 1 if upto is None else upto
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    accs, sizes = [], []
    for task in stream.tasks[: last + 1]:
        if not task.test:
            raise ValueError(f"task {task.task_id} has an empty test set")
        images, labels, _ = stack_samples(task.test)
        preds = _predict(model, images, task.classes if mode == "task-il" else None)
        accs.append(float((preds == labels).mean()))
        sizes.append(len(labels))
    if was_training:
        model.train()
    return Evaluation(accs, final_average(accs), sizes)


def final_average(accuracies) -> float:
    # exact rational sum, rounded once
    return float(statistics.mean(float(a) for a in accuracies))


# --- parameter counting ---------------------------------------------------

def _numel(params) -> int:
    return sum(p.numel() for p in params)


def count_parameters(model: nn.Module, phase: str = "train") -> int:
    """Train: C (+ S when saliency is used). Inference: C plus whatever of S the forward needs."""
    if phase not in ("train", "inference"):
        raise ValueError(f"phase must be 'train' or 'inference', got {phase!r}")
    if not isinstance(model, ModulatedBackbone):
        return _numel(model.parameters())
    n = _numel(model.classifier_parameters())
    if phase == "train":
        if model.variant != "none":
            n += _numel(model.saliency.parameters())
        return n
    if model.variant in ("sim", "sai"):
        return n + _numel(model.saliency.parameters())
    if model.uses_feature_modulation:
        return n + _numel(model.saliency.encoder.parameters())
    return n


# --- construction ---------------------------------------------------------

_STREAM_CACHE: dict = {}
_PRETRAIN_CACHE: dict = {}


def build_stream(config: ExperimentConfig, seed: int) -> TaskStream:
    """Benchmark stream for ``seed``; cached so paired arms share it exactly."""
    b = config.benchmark
    key = (dataclasses.astuple(b), seed)
    if key not in _STREAM_CACHE:
        size = (b.image_size, b.image_size)
        if b.kind == "shapes":
            data = generate_shapes_dataset(b.num_classes, b.samples_per_class, size, seed=seed, clutter=b.clutter)
        else:
            data = read_manifest(b.manifest, size)
        stream = build_split_benchmark(data, b.num_tasks, b.classes_per_task, seed, b.test_fraction)
        if b.spurious_scale:
            stream = inject_spurious_features(stream, b.spurious_scale)
        if len(_STREAM_CACHE) > 8:
            _STREAM_CACHE.clear()
        _STREAM_CACHE[key] = stream
    return _STREAM_CACHE[key]


def pretrain_classifier(backbone: Backbone, data, epochs: int, lr: float, seed: int) -> Backbone:
    """Supervised pretraining of a backbone on disjoint classes with a throwaway head."""
    classes = data.classes
    remap = {c: i for i, c in enumerate(classes)}
    head = nn.Linear(backbone.out_channels, len(classes))
    images = torch.from_numpy(np.ascontiguousarray(data.images.transpose(0, 3, 1, 2)))
    labels = torch.tensor([remap[int(c)] for c in data.labels])
    opt = torch.optim.SGD(list(backbone.parameters()) + list(head.parameters()), lr=lr, momentum=0.9)
    gen = torch.Generator().manual_seed(seed)
    for _ in range(epochs):
        order = torch.randperm(len(images), generator=gen)
        for i in range(0, len(order), 16):
            idx = order[i:i + 16]
            loss = F.cross_entropy(head(backbone(images[idx])[-1].mean(dim=(2, 3))), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return backbone


def pretrained_saliency(config: ExperimentConfig, seed: int, benchmark_classes) -> SaliencyPredictor:
    """Fresh copy of the pretrained predictor for this (pretrain config, image size, seed)."""
    p, b = config.pretrain, config.benchmark
    size = (b.image_size, b.image_size)
    key = (dataclasses.astuple(p), size, seed)
    if key not in _PRETRAIN_CACHE:
        torch.manual_seed(seed)
        S = SaliencyPredictor(size)
        if p.kind != "none" and p.epochs > 0:
            offset = max(b.num_classes, max(benchmark_classes) + 1)
            data = generate_shapes_dataset(p.classes, p.samples_per_class, size, seed=seed + 7919,
                                           class_offset=offset, clutter=b.clutter)
            if p.kind == "classification":
                pretrain_classifier(S.encoder, data, p.epochs, p.lr, seed)
                for q in S.encoder.parameters():
                    q.requires_grad_(False)
            pretrain_saliency(S, data, p.epochs, p.lr, seed=seed, benchmark_classes=benchmark_classes)
            for q in S.encoder.parameters():
                q.requires_grad_(True)
        if len(_PRETRAIN_CACHE) > 8:
            _PRETRAIN_CACHE.clear()
        _PRETRAIN_CACHE[key] = S.state_dict()
    S = SaliencyPredictor(size)
    S.load_state_dict(_PRETRAIN_CACHE[key])
    return S


def build_model(config: ExperimentConfig, stream: TaskStream, seed: int) -> ModulatedBackbone:
    num_classes = max(stream.classes) + 1
    S = pretrained_saliency(config, seed, stream.classes)
    torch.manual_seed(seed)
    model = ModulatedBackbone(num_classes, S.image_size, config.sam.variant, config.sam.scheme, S)
    if config.pretrain.kind != "none" and config.pretrain.epochs > 0:
        # classifier starts from the same pretrained weights as the saliency encoder
        model.classifier.load_from(S.encoder)
    return model


# --- training -------------------------------------------------------------

@dataclass
class RunResult:
    model: ModulatedBackbone
    learner: Learner
    records: list
    steps: list  # (loss, loss_s, loss_c) per gradient step
    visits: dict


def _saliency_trained(config: ExperimentConfig) -> bool:
    return config.sam.variant != "none" and config.sam.train_saliency


def train_online(
    config: ExperimentConfig,
    stream: TaskStream,
    seed: int = 0,
    model: Optional[ModulatedBackbone] = None,
    check_gradients: bool = False,
    experiment: str = "",
) -> RunResult:
    """Single pass over the stream, task by task, with L = L_s + lam * L_c.

    Evaluates after every task boundary and returns one record per task
    (one in total for the joint learner, which sees a single shuffled pass).
    """
    t0 = time.perf_counter()
    if model is None:
        model = build_model(config, stream, seed)
    torch.manual_seed(seed)
    lc, tc = config.learner, config.train
    num_classes = model.num_classes
    learner = make_learner(
        lc.kind, num_classes, lc.buffer, tc.replay_batch, seed,
        alpha=lc.alpha, beta=lc.beta, temperature=lc.temperature, weight=lc.lwf_weight,
        strength=lc.ewc_strength, decay=lc.ewc_decay,
    )
    train_sal = _saliency_trained(config)
    params = list(model.classifier_parameters())
    if train_sal:
        params += list(model.saliency.parameters())
    opt = torch.optim.SGD(params, lr=tc.lr, momentum=tc.momentum)
    lam = config.sam.lam
    model.saliency_frozen = not train_sal
    model.train()

    if lc.kind == "joint":
        samples = stream.train_samples()
        order = np.random.default_rng(seed).permutation(len(samples))
        phases = [(stream.num_tasks - 1, [samples[i] for i in order])]
    else:
        phases = [(t.task_id, t.train) for t in stream.tasks]

    visits: dict = {}
    steps, records = [], []
    for task_index, samples in phases:
        learner.begin_task(task_index, stream.tasks[task_index].classes)
        images, labels, sal = stack_samples(samples)
        images_t, labels_t = torch.from_numpy(images), torch.from_numpy(labels)
        sal_t = None if sal is None else torch.from_numpy(sal)
        if train_sal and sal_t is None:
            raise ConfigError("saliency training needs saliency targets on every stream sample")
        for i in range(0, len(samples), tc.stream_batch):
            for s in samples[i:i + tc.stream_batch]:
                if s.name in visits:
                    raise OnlineConstraintError(f"sample {s.name!r} revisited within the stream pass")
                visits[s.name] = 1
            x, y = images_t[i:i + tc.stream_batch], labels_t[i:i + tc.stream_batch]
            out = model(x, compute_saliency=train_sal)
            loss_s = kld_loss(out.saliency, sal_t[i:i + tc.stream_batch]) if train_sal else torch.zeros(())
            loss_c = learner.classification_loss(model, out.logits, y, x)
            if check_gradients:
                stop_gradient_guard(model, loss_c)
            loss = loss_s + lam * loss_c
            opt.zero_grad()
            loss.backward()
            opt.step()
            steps.append((loss.item(), loss_s.item(), loss_c.item()))
            learner.after_step(x, y, out.logits, None if sal_t is None else sal_t[i:i + tc.stream_batch],
                               task_index)
        learner.end_task(model, images_t, labels_t)
        records.append(_record(config, model, stream, task_index, seed, t0, experiment))
        r = records[-1]
        log.info("%s seed=%d task=%d class-il=%.4f task-il=%.4f", r.label, seed, task_index, r.class_il, r.task_il)
    return RunResult(model, learner, records, steps, visits)


def _record(config, model, stream, task_index, seed, t0, experiment) -> ResultRecord:
    cil = evaluate(model, stream, "class-il", task_index)
    til = evaluate(model, stream, "task-il", task_index)
    cc = sim = kld = None
    if config.sam.variant != "none":
        held = [s for t in stream.tasks for s in t.test]
        if all(s.saliency is not None for s in held):
            m = evaluate_saliency(model.saliency, held)
            cc, sim, kld = (m.cc if m.cc_defined else None), m.sim, m.kld
    return ResultRecord(
        seed=seed, task_index=task_index, label=config.label, learner=config.learner.kind,
        buffer=config.learner.buffer, variant=config.sam.variant, scheme=config.sam.scheme,
        task_accuracies_class_il=cil.per_task, task_accuracies_task_il=til.per_task,
        class_il=cil.average, task_il=til.average, sal_cc=cc, sal_sim=sim, sal_kld=kld,
        wall_clock=time.perf_counter() - t0,
        params_train=count_parameters(model, "train"), params_inference=count_parameters(model, "inference"),
        experiment=experiment,
    )


def run_experiment(config: ExperimentConfig, seed: int, experiment: str = "") -> RunResult:
    stream = build_stream(config, seed)
    return train_online(config, stream, seed, experiment=experiment)


# --- matrix ---------------------------------------------------------------

@dataclass
class Aggregate:
    label: str
    learner: str
    buffer: int
    variant: str
    scheme: str
    runs: int
    class_il_mean: float
    class_il_std: float
    task_il_mean: float
    task_il_std: float


def mean_std(values) -> tuple:
    """Mean and sample standard deviation (ddof=1; 0 for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    std = float(v.std(ddof=1)) if len(v) > 1 else 0.0
    return float(v.mean()), std


def aggregate(records) -> list:
    """Mean +- std of final-task accuracy per label, in first-seen order."""
    final: dict = {}
    for r in records:
        key = (r.label, r.seed)
        if key not in final or r.task_index > final[key].task_index:
            final[key] = r
    groups: dict = {}
    for (label, _), r in final.items():
        groups.setdefault(label, []).append(r)
    rows = []
    for label, rs in groups.items():
        c = mean_std([r.class_il for r in rs])
        t = mean_std([r.task_il for r in rs])
        r0 = rs[0]
        rows.append(Aggregate(label, r0.learner, r0.buffer, r0.variant, r0.scheme, len(rs), *c, *t))
    return rows


@dataclass
class MatrixResult:
    records: list
    aggregates: list
    failures: list


def run_matrix(configs, seeds=None, out=None, experiment: str = "") -> MatrixResult:
    """Run every config for every seed; failures are recorded and the matrix continues."""
    records, failures = [], []
    for cfg in configs:
        for seed in (seeds if seeds is not None else cfg.train.seeds):
            try:
                res = run_experiment(cfg, seed, experiment)
            except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the grid
                log.error("run %s seed=%d failed: %s", cfg.label, seed, exc)
                failures.append((cfg.label, seed, repr(exc)))
                continue
            records.extend(res.records)
            if out is not None:
                write_records(out, res.records, append=True)
    return MatrixResult(records, aggregate(records), failures)
