"""Task streams, the synthetic shapes benchmark and saliency oracles.

Images are H x W x 3 float32 arrays in [0, 1]; saliency maps are H x W
non-negative float32 arrays kept un-normalized (losses and metrics do the
sum-normalization).
"""
from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from samcl.errors import ConfigError

SHAPES = ("circle", "square", "triangle", "cross", "diamond", "ring", "hbar", "vbar")
COLORS = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.80, 0.20),
    "blue": (0.15, 0.30, 0.95),
    "yellow": (0.95, 0.90, 0.15),
    "magenta": (0.90, 0.20, 0.85),
    "cyan": (0.15, 0.85, 0.90),
}


@dataclass
class Sample:
    image: np.ndarray
    label: int
    saliency: Optional[np.ndarray] = None
    task_id: int = 0
    name: str = ""
    meta: dict = field(default_factory=dict)


@dataclass
class ImageCollection:
    """A flat labeled image collection, before any task split."""

    images: np.ndarray  # (N, H, W, 3)
    labels: np.ndarray  # (N,)
    names: list
    saliency: Optional[np.ndarray] = None  # (N, H, W)
    meta: list = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    @property
    def classes(self):
        return sorted(int(c) for c in np.unique(self.labels))

    def sample(self, i: int) -> Sample:
        sal = None if self.saliency is None else self.saliency[i]
        meta = self.meta[i] if self.meta else {}
        return Sample(self.images[i], int(self.labels[i]), sal, 0, self.names[i], meta)


@dataclass
class Task:
    task_id: int
    classes: tuple
    train: list
    test: list


@dataclass
class TaskStream:
    tasks: list
    classes_per_task: int
    class_partition: list
    seed: int = 0

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    @property
    def classes(self) -> list:
        return sorted(c for part in self.class_partition for c in part)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def image_size(self) -> tuple:
        return tuple(self.tasks[0].train[0].image.shape[:2])

    def task_of_class(self, label: int) -> int:
        for t, part in enumerate(self.class_partition):
            if label in part:
                return t
        raise KeyError(label)

    def train_samples(self) -> list:
        return [s for t in self.tasks for s in t.train]

    def test_samples(self) -> list:
        return [s for t in self.tasks for s in t.test]


def class_combinations() -> list:
    """All (shape, color) pairs, ordered so consecutive classes vary in both."""
    colors = list(COLORS)
    combos = []
    for d in range(len(colors)):
        for s, shape in enumerate(SHAPES):
            combos.append((shape, colors[(s + d) % len(colors)]))
    return combos


def shape_mask(shape: str, center, radius: float, size) -> np.ndarray:
    H, W = size
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    dy, dx = yy - center[0], xx - center[1]
    r = radius
    if shape == "circle":
        m = dy**2 + dx**2 <= r**2
    elif shape == "square":
        m = (np.abs(dy) <= 0.8 * r) & (np.abs(dx) <= 0.8 * r)
    elif shape == "triangle":
        h = 0.9 * r
        m = (dy >= -h) & (dy <= h) & (np.abs(dx) <= (dy + h) / (2 * h) * r)
    elif shape == "cross":
        t = r / 3
        m = ((np.abs(dy) <= t) & (np.abs(dx) <= r)) | ((np.abs(dx) <= t) & (np.abs(dy) <= r))
    elif shape == "diamond":
        m = np.abs(dx) + np.abs(dy) <= r
    elif shape == "ring":
        d2 = dy**2 + dx**2
        m = (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    elif shape == "hbar":
        m = (np.abs(dy) <= 0.35 * r) & (np.abs(dx) <= r)
    elif shape == "vbar":
        m = (np.abs(dx) <= 0.35 * r) & (np.abs(dy) <= r)
    else:
        raise ConfigError(f"unknown shape {shape!r}")
    return m


def gaussian_map(centroid, sigma: float, size) -> np.ndarray:
    """Isotropic Gaussian on the pixel grid, truncated at the image borders."""
    H, W = size
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    d2 = (yy - centroid[0]) ** 2 + (xx - centroid[1]) ** 2
    return np.exp(-d2 / (2.0 * sigma**2)).astype(np.float32)


def _texture(rng: np.random.Generator, size, grid: int = 4) -> np.ndarray:
    H, W = size
    coarse = rng.random((grid, grid, 3))
    ys = np.linspace(0, grid - 1, H)
    xs = np.linspace(0, grid - 1, W)
    y0 = np.floor(ys).astype(int).clip(0, grid - 2)
    x0 = np.floor(xs).astype(int).clip(0, grid - 2)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    a = coarse[y0][:, x0]
    b = coarse[y0][:, x0 + 1]
    c = coarse[y0 + 1][:, x0]
    d = coarse[y0 + 1][:, x0 + 1]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx)


def render_sample(
    rng: np.random.Generator,
    shape: str,
    color,
    size,
    center=None,
    radius=None,
    clutter: int = 4,
    texture_amplitude: float = 0.35,
    noise: float = 0.05,
    color_jitter: float = 0.08,
):
    """Render one shape on a textured, cluttered background.

    Returns (image, mask).
    """
    H, W = size
    short = min(H, W)
    if radius is None:
        radius = rng.uniform(0.2, 0.3) * short
    if center is None:
        margin = radius + 1
        center = (rng.uniform(margin, H - 1 - margin), rng.uniform(margin, W - 1 - margin))
    base = rng.uniform(0.25, 0.55)
    img = base + texture_amplitude * (_texture(rng, size) - 0.5)
    img = img + noise * rng.standard_normal((H, W, 3))
    yy, xx = np.mgrid[0:H, 0:W]
    for _ in range(clutter):
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        cr = rng.uniform(1.0, 0.08 * short + 1.0)
        blob = (yy - cy) ** 2 + (xx - cx) ** 2 <= cr**2
        img[blob] = rng.random(3)
    mask = shape_mask(shape, center, radius, size)
    rgb = np.clip(np.asarray(color) + color_jitter * rng.uniform(-1, 1, 3), 0, 1)
    img[mask] = rgb
    return np.clip(img, 0.0, 1.0).astype(np.float32), mask


def _mask_stats(mask: np.ndarray):
    ys, xs = np.nonzero(mask)
    centroid = (float(ys.mean()), float(xs.mean()))
    bbox = (int(ys.min()), int(xs.min()), int(ys.max()), int(xs.max()))
    return centroid, bbox


def generate_shapes_dataset(
    num_classes: int,
    samples_per_class: int,
    image_size=(32, 32),
    seed: int = 0,
    class_offset: int = 0,
    sigma: Optional[float] = None,
    clutter: int = 4,
) -> ImageCollection:
    """Synthetic shapes with an analytic centroid-Gaussian saliency map.

    Class ``c`` is the ``c``-th entry of :func:`class_combinations`; pass
    ``class_offset`` to draw a class-disjoint collection (e.g. for pretraining).
    """
    H, W = image_size
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    if H < 16 or W < 16:
        raise ConfigError(f"image_size must be at least 16x16, got {H}x{W}")
    combos = class_combinations()
    if class_offset + num_classes > len(combos):
        raise ConfigError(
            f"requested classes {class_offset}..{class_offset + num_classes - 1} but only "
            f"{len(combos)} shape x color combinations exist"
        )
    if sigma is None:
        sigma = min(H, W) / 8.0
    rng = np.random.default_rng(seed)
    n = num_classes * samples_per_class
    images = np.empty((n, H, W, 3), dtype=np.float32)
    saliency = np.empty((n, H, W), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    names, meta = [], []
    i = 0
    for c in range(class_offset, class_offset + num_classes):
        shape, color = combos[c]
        for k in range(samples_per_class):
            img, mask = render_sample(rng, shape, COLORS[color], (H, W), clutter=clutter)
            centroid, bbox = _mask_stats(mask)
            images[i] = img
            saliency[i] = gaussian_map(centroid, sigma, (H, W))
            labels[i] = c
            names.append(f"shapes_c{c:03d}_{k:05d}")
            meta.append({"centroid": centroid, "bbox": bbox, "sigma": sigma})
            i += 1
    return ImageCollection(images, labels, names, saliency, meta)


def build_split_benchmark(
    dataset: ImageCollection,
    num_tasks: int,
    classes_per_task: int,
    seed: int = 0,
    test_fraction: float = 0.2,
    shuffle_classes: bool = True,
) -> TaskStream:
    """Split a collection into ``num_tasks`` disjoint ``classes_per_task``-way tasks.

    Classes are assigned to tasks by a seeded permutation followed by
    consecutive chunks. Each class is split into train/test before being
    placed in its task.
    """
    if num_tasks < 1 or classes_per_task < 1:
        raise ConfigError("num_tasks and classes_per_task must be positive")
    classes = dataset.classes
    needed = num_tasks * classes_per_task
    if len(classes) < needed:
        raise ConfigError(
            f"benchmark needs {needed} classes ({num_tasks} tasks x {classes_per_task}) "
            f"but the dataset has {len(classes)}: short by {needed - len(classes)}"
        )
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(classes)) if shuffle_classes else list(classes)
    order = [int(c) for c in order[:needed]]
    partition = [tuple(sorted(order[t * classes_per_task:(t + 1) * classes_per_task]))
                 for t in range(num_tasks)]

    by_class = {c: np.flatnonzero(dataset.labels == c) for c in order}
    tasks = []
    for t, part in enumerate(partition):
        train, test = [], []
        for c in part:
            idx = by_class[c]
            if len(idx) < 2:
                raise ConfigError(f"class {c} has {len(idx)} samples; need >= 2 for a train/test split")
            idx = rng.permutation(idx)
            n_test = min(max(1, int(round(len(idx) * test_fraction))), len(idx) - 1)
            test.extend(sorted(int(i) for i in idx[:n_test]))
            train.extend(int(i) for i in idx[n_test:])
        train = [int(i) for i in rng.permutation(train)]
        tasks.append(Task(
            t, part,
            [dataclasses.replace(dataset.sample(i), task_id=t) for i in train],
            [dataclasses.replace(dataset.sample(i), task_id=t) for i in test],
        ))
    return TaskStream(tasks, classes_per_task, partition, seed)


def inject_spurious_features(stream: TaskStream, brightness_scale: float = 5.0) -> TaskStream:
    """Brighten training images by ``brightness_scale * (c + 1)`` on a 0-255 scale.

    Test samples are shared with the input stream, untouched.
    """
    tasks = []
    for task in stream.tasks:
        train = []
        for s in task.train:
            offset = brightness_scale * (s.label + 1) / 255.0
            img = np.minimum(s.image + np.float32(offset), np.float32(1.0)).astype(np.float32)
            train.append(dataclasses.replace(s, image=img))
        tasks.append(Task(task.task_id, task.classes, train, task.test))
    return TaskStream(tasks, stream.classes_per_task, stream.class_partition, stream.seed)


# --- saliency oracles -----------------------------------------------------

ORACLE_KINDS = ("precomputed-files", "synthetic-centroid-gaussian", "frozen-predictor")


class SaliencyOracle:
    """Deterministic source of target saliency maps.

    kinds:
      ``synthetic-centroid-gaussian`` -- Gaussian at ``meta["centroid"]``;
        ``sigma`` (pixels) defaults to the sample's ``meta["sigma"]``.
      ``precomputed-files`` -- ``root``/<stem>.pgm or <stem>.f32.
      ``frozen-predictor`` -- output of a trained ``SaliencyPredictor``.
    """

    def __init__(self, kind: str, **params):
        if kind not in ORACLE_KINDS:
            raise ConfigError(f"unknown oracle kind {kind!r}; expected one of {ORACLE_KINDS}")
        self.kind = kind
        self.params = params
        if kind == "precomputed-files" and "root" not in params:
            raise ConfigError("precomputed-files oracle needs a 'root' directory")
        if kind == "frozen-predictor" and "predictor" not in params:
            raise ConfigError("frozen-predictor oracle needs a 'predictor'")

    def __call__(self, sample: Sample) -> np.ndarray:
        H, W = sample.image.shape[:2]
        if self.kind == "synthetic-centroid-gaussian":
            if "centroid" not in sample.meta:
                raise ConfigError(f"sample {sample.name!r} has no shape centroid for the synthetic oracle")
            sigma = self.params.get("sigma") or sample.meta.get("sigma") or min(H, W) / 8.0
            return gaussian_map(sample.meta["centroid"], sigma, (H, W))
        if self.kind == "precomputed-files":
            root = Path(self.params["root"])
            stem = Path(sample.name).stem
            for ext in (".pgm", ".f32"):
                path = root / (stem + ext)
                if path.exists():
                    return read_saliency_map(path)
            raise FileNotFoundError(f"no saliency map for sample {sample.name!r} (looked for {root / stem}.pgm|.f32)")
        predictor = self.params["predictor"]
        return predictor.predict_map(sample.image)


def attach_saliency(stream: TaskStream, oracle: SaliencyOracle, overwrite: bool = False) -> TaskStream:
    def fill(s: Sample) -> Sample:
        if s.saliency is not None and oracle.kind == "precomputed-files" and not overwrite:
            return s
        return dataclasses.replace(s, saliency=np.asarray(oracle(s), dtype=np.float32))

    tasks = [Task(t.task_id, t.classes, [fill(s) for s in t.train], [fill(s) for s in t.test])
             for t in stream.tasks]
    return TaskStream(tasks, stream.classes_per_task, stream.class_partition, stream.seed)


# --- file formats ---------------------------------------------------------

def write_pgm(path, smap: np.ndarray, maxval: int = 65535) -> None:
    """ASCII portable graymap (P2), scaled so the map maximum hits ``maxval``."""
    smap = np.asarray(smap, dtype=np.float64)
    H, W = smap.shape
    peak = smap.max()
    q = np.zeros_like(smap) if peak <= 0 else np.rint(smap / peak * maxval)
    rows = "\n".join(" ".join(str(int(v)) for v in row) for row in q)
    Path(path).write_text(f"P2\n{W} {H}\n{maxval}\n{rows}\n", encoding="ascii")


def write_f32(path, smap: np.ndarray) -> None:
    """Raw container: uint32 W, uint32 H (little-endian), then row-major float32."""
    smap = np.asarray(smap, dtype="<f4")
    H, W = smap.shape
    Path(path).write_bytes(struct.pack("<II", W, H) + smap.tobytes(order="C"))


def _read_pgm(data: bytes) -> np.ndarray:
    tokens = []
    for line in data.decode("ascii").splitlines():
        line = line.split("#", 1)[0]
        tokens.extend(line.split())
    if tokens[0] != "P2":
        raise ValueError(f"unsupported graymap magic {tokens[0]!r}")
    W, H, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    vals = np.array(tokens[4:4 + W * H], dtype=np.float64)
    if vals.size != W * H:
        raise ValueError(f"graymap truncated: expected {W * H} values, got {vals.size}")
    return (vals.reshape(H, W) / maxval).astype(np.float32)


def read_saliency_map(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:2] == b"P2":
        return _read_pgm(data)
    W, H = struct.unpack("<II", data[:8])
    body = data[8:]
    if len(body) != 4 * W * H:
        raise ValueError(f"{path}: expected {4 * W * H} payload bytes for {W}x{H}, got {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(H, W).astype(np.float32)


def _load_image(path: Path, size=None) -> np.ndarray:
    if path.suffix == ".npy":
        img = np.load(path).astype(np.float32)
    else:
        from PIL import Image

        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None and im.size != (size[1], size[0]):
                im = im.resize((size[1], size[0]), Image.BILINEAR)
            img = np.asarray(im, dtype=np.float32) / 255.0
    return img


def read_manifest(path, image_size=None) -> ImageCollection:
    """Read a tab-separated manifest: image path, label[, saliency path].

    Paths are relative to the manifest's directory.
    """
    path = Path(path)
    root = path.parent
    images, labels, names, sal = [], [], [], []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) not in (2, 3):
            raise ValueError(f"{path}:{lineno}: expected 2 or 3 tab-separated fields, got {len(parts)}")
        images.append(_load_image(root / parts[0], image_size))
        labels.append(int(parts[1]))
        names.append(Path(parts[0]).stem)
        sal.append(read_saliency_map(root / parts[2]) if len(parts) == 3 and parts[2] else None)
    saliency = None
    if sal and all(s is not None for s in sal):
        saliency = np.stack(sal)
    return ImageCollection(np.stack(images), np.asarray(labels, dtype=np.int64), names, saliency, [])


def write_manifest(path, samples: Sequence[Sample], saliency_format: str = "f32") -> None:
    """Write samples as .npy images (+ saliency maps) next to a manifest file."""
    path = Path(path)
    root = path.parent
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        stem = s.name or f"sample_{i:06d}"
        rel_img = f"images/{stem}.npy"
        np.save(root / rel_img, s.image.astype(np.float32))
        fields = [rel_img, str(int(s.label))]
        if s.saliency is not None:
            (root / "saliency").mkdir(exist_ok=True)
            rel_sal = f"saliency/{stem}.{saliency_format}"
            writer: Callable = write_f32 if saliency_format == "f32" else write_pgm
            writer(root / rel_sal, s.saliency)
            fields.append(rel_sal)
        lines.append("\t".join(fields))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def stack_samples(samples: Sequence[Sample]):
    """Stack samples into (images NCHW, labels, saliency NHW or None) numpy arrays."""
    images = np.stack([s.image for s in samples]).transpose(0, 3, 1, 2)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    if all(s.saliency is not None for s in samples):
        sal = np.stack([s.saliency for s in samples])
    else:
        sal = None
    return np.ascontiguousarray(images, dtype=np.float32), labels, sal
