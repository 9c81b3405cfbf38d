"""Synthetic pretrain / control / class-incremental data and CSV ingestion.

Classes are isotropic Gaussian clusters around unit-norm centroids. The first
``superclass_count`` pretrain classes double as superclasses: every CIL class
centroid is a small rotation of one of them, so the incremental stream refines
concepts the pretrained model already separates coarsely. CIL classes are
grouped by superclass in id order, so consecutive tasks mostly refine
different superclasses.

Every class also gets a descriptor: a noisy copy of its centroid that plays
the role of a class name/prompt when new classes are attached to a pretrained
model.
"""

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError, ParseError, SchemaError

MANIFEST = "manifest.json"


@dataclass(frozen=True)
class UniverseConfig:
    pretrain_classes: int = 20
    cil_classes: int = 20
    tasks: int = 5
    input_dim: int = 32
    per_class_n: int = 200
    cil_train_per_class: int = 100
    cil_test_per_class: int = 50
    control_per_class: int = 50
    cluster_spread: float = 0.5
    fine_angle: float = 0.3
    superclass_count: int = 5
    conditional_n: int = 200
    descriptor_noise: float = 0.35
    seed: int = 0

    def validate(self):
        for name in ("pretrain_classes", "cil_classes", "tasks", "input_dim", "per_class_n",
                     "cil_train_per_class", "cil_test_per_class", "control_per_class",
                     "superclass_count"):
            if getattr(self, name) < 1:
                raise ArgumentError(f"{name} must be positive")
        if self.cil_classes % self.tasks:
            raise ArgumentError(
                f"cil_classes={self.cil_classes} not divisible by tasks={self.tasks}")
        if self.superclass_count > self.pretrain_classes:
            raise ArgumentError("superclass_count exceeds pretrain_classes")
        if min(self.cluster_spread, self.fine_angle, self.conditional_n,
               self.descriptor_noise) < 0:
            raise ArgumentError("spread, angle, noise and conditional_n must be >= 0")


@dataclass
class LabeledSet:
    features: np.ndarray
    labels: np.ndarray
    classes: np.ndarray = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.classes is None:
            self.classes = np.unique(self.labels)
        self.classes = np.asarray(self.classes, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise SchemaError("features/labels row counts differ")

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, class_ids):
        keep = np.isin(self.labels, class_ids)
        return LabeledSet(self.features[keep], self.labels[keep], np.sort(class_ids))


@dataclass
class Task:
    classes: np.ndarray
    train: LabeledSet
    test: LabeledSet


@dataclass
class CilStream:
    tasks: list

    def __len__(self):
        return len(self.tasks)

    def classes_through(self, t):
        """Class ids of tasks 0..t inclusive."""
        return np.concatenate([task.classes for task in self.tasks[:t + 1]])

    @property
    def all_classes(self):
        return self.classes_through(len(self.tasks) - 1)


@dataclass
class Universe:
    pretrain: LabeledSet
    control: LabeledSet
    stream: CilStream
    conditional: np.ndarray
    parent: dict          # CIL class id -> pretrain (superclass) id
    config: UniverseConfig
    descriptors: np.ndarray = None  # (num_classes, input_dim), row = class id
    centroids: np.ndarray = None    # generator truth; absent for loaded universes

    @property
    def num_classes(self):
        return self.config.pretrain_classes + self.config.cil_classes

    @property
    def input_dim(self):
        return self.config.input_dim

    @property
    def pretrain_classes(self):
        return self.pretrain.classes


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _rotate_towards(base, rng, angle):
    w = rng.standard_normal(base.shape)
    w -= (w @ base) * base
    w = _unit(w)
    return np.cos(angle) * base + np.sin(angle) * w


def _sample(rng, centroids, ids, n, spread):
    d = centroids.shape[1]
    labels = np.repeat(ids, n)
    noise = rng.standard_normal((labels.size, d)) * (spread / np.sqrt(d))
    return centroids[labels - ids[0]] + noise, labels


def make_synthetic_universe(cfg=None, seed=None):
    cfg = cfg or UniverseConfig()
    if seed is not None:
        cfg = UniverseConfig(**{**asdict(cfg), "seed": int(seed)})
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    d, P, C = cfg.input_dim, cfg.pretrain_classes, cfg.cil_classes

    pre_centroids = _unit(rng.standard_normal((P, d)))
    pre_ids = np.arange(P)
    cil_ids = np.arange(P, P + C)
    parents = (np.arange(C) * cfg.superclass_count) // C
    angles = cfg.fine_angle * rng.uniform(0.5, 1.0, C)
    cil_centroids = np.stack([_rotate_towards(pre_centroids[p], rng, a)
                              for p, a in zip(parents, angles)])

    x, y = _sample(rng, pre_centroids, pre_ids, cfg.per_class_n, cfg.cluster_spread)
    pretrain = LabeledSet(x, y, pre_ids)
    x, y = _sample(rng, pre_centroids, pre_ids, cfg.control_per_class, cfg.cluster_spread)
    control = LabeledSet(x, y, pre_ids)
    x, y = _sample(rng, cil_centroids, cil_ids, cfg.cil_train_per_class, cfg.cluster_spread)
    cil_train = LabeledSet(x, y, cil_ids)
    x, y = _sample(rng, cil_centroids, cil_ids, cfg.cil_test_per_class, cfg.cluster_spread)
    cil_test = LabeledSet(x, y, cil_ids)
    if cfg.conditional_n:
        pick = rng.integers(0, P, cfg.conditional_n)
        conditional = pre_centroids[pick] + rng.standard_normal(
            (cfg.conditional_n, d)) * (cfg.cluster_spread / np.sqrt(d))
    else:
        conditional = np.zeros((0, d))

    centroids = np.concatenate([pre_centroids, cil_centroids])
    descriptors = centroids + rng.standard_normal(centroids.shape) * (
        cfg.descriptor_noise / np.sqrt(d))
    stream = split_class_incremental(cil_train, cfg.tasks, cil_test)
    parent = {int(c): int(p) for c, p in zip(cil_ids, parents)}
    return Universe(pretrain, control, stream, conditional, parent, cfg, descriptors, centroids)


def split_class_incremental(train, T, test=None):
    """Partition classes, sorted by id, into ``T`` contiguous groups."""
    classes = np.sort(train.classes)
    if T < 1 or classes.size % T:
        raise ArgumentError(f"{classes.size} classes cannot be split into {T} tasks")
    per = classes.size // T
    tasks = []
    for t in range(T):
        cls = classes[t * per:(t + 1) * per]
        tasks.append(Task(cls, train.subset(cls),
                          test.subset(cls) if test is not None else None))
    return CilStream(tasks)


# ------------------------------------------------------------------ CSV I/O

def write_csv_dataset(path, labeled):
    d = labeled.features.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"f{i}" for i in range(d)])
        for label, row in zip(labeled.labels, labeled.features):
            w.writerow([int(label)] + [format(v, ".17g") for v in row])


def load_csv_dataset(path, input_dim, classes=None):
    """Parse ``label,f0,...,f{d-1}`` rows into a LabeledSet."""
    expected = ["label"] + [f"f{i}" for i in range(input_dim)]
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        for col in expected:
            if col not in header:
                raise SchemaError(f"{path}: missing column {col!r}")
        if header != expected:
            extra = [h for h in header if h not in expected]
            raise SchemaError(f"{path}: unexpected columns {extra or header}")
        labels, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected):
                raise ParseError(f"{path}: expected {len(expected)} fields, got {len(row)}",
                                 lineno)
            try:
                labels.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise ParseError(f"{path}: {exc}", lineno) from None
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    features = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(features)):
        raise SchemaError(f"{path}: non-finite feature values")
    return LabeledSet(features, np.array(labels, dtype=np.int64), classes)


def export_universe(universe, out_dir):
    """Write one CSV per split plus ``manifest.json``; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = [("pretrain", universe.pretrain), ("control", universe.control)]
    for t, task in enumerate(universe.stream.tasks):
        splits += [(f"task{t}_train", task.train), (f"task{t}_test", task.test)]
    cond = universe.conditional
    if cond.shape[0]:
        splits.append(("conditional", LabeledSet(cond, np.full(cond.shape[0], -1), [])))
    desc = universe.descriptors
    splits.append(("descriptors", LabeledSet(desc, np.arange(desc.shape[0]))))
    entries = []
    for name, ls in splits:
        fname = f"{name}.csv"
        write_csv_dataset(out / fname, ls)
        entries.append({"name": name, "file": fname, "rows": len(ls),
                        "classes": [int(c) for c in ls.classes]})
    manifest = {
        "format": "spcl-universe",
        "version": 1,
        "input_dim": universe.input_dim,
        "generator": asdict(universe.config),
        "pretrain_classes": [int(c) for c in universe.pretrain.classes],
        "tasks": [[int(c) for c in task.classes] for task in universe.stream.tasks],
        "parent": {str(k): v for k, v in sorted(universe.parent.items())},
        "splits": entries,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_universe(in_dir):
    root = Path(in_dir)
    try:
        manifest = json.loads((root / MANIFEST).read_text())
    except FileNotFoundError:
        raise SchemaError(f"{root}: no {MANIFEST}") from None
    d = manifest["input_dim"]
    by_name = {s["name"]: s for s in manifest["splits"]}

    def load(name):
        s = by_name[name]
        return load_csv_dataset(root / s["file"], d, s["classes"])

    tasks = []
    for t, cls in enumerate(manifest["tasks"]):
        tasks.append(Task(np.array(cls, dtype=np.int64), load(f"task{t}_train"),
                          load(f"task{t}_test")))
    conditional = load("conditional").features if "conditional" in by_name else np.zeros((0, d))
    cfg = UniverseConfig(**manifest["generator"])
    return Universe(load("pretrain"), load("control"), CilStream(tasks), conditional,
                    {int(k): int(v) for k, v in manifest["parent"].items()}, cfg,
                    load("descriptors").features)
