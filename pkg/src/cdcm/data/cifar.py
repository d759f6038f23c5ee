"""Imbalanced CIFAR-10 anomaly benchmark with seen and unseen anomaly classes.

For normal class ``k`` the five classes ``k+1 .. k+5 (mod 10)`` are *seen*
anomalies (present in train and val) and ``k+6 .. k+9 (mod 10)`` are *unseen*
anomalies (test only). Counts per partition:

==========  ======  =======
partition   normal  anomaly
==========  ======  =======
train       4000    400 (80 per seen class)
val         1000    100 (20 per seen class)
test        1000    9000 (every other test image)
==========  ======  =======

A split is fully described by its manifest of ``(source split, class id,
sample index)`` triples, so it can be rebuilt without shipping pixels.
"""

import json
import pickle
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import seeding
from ..errors import ConfigurationError
from .subset import GROUP_NORMAL, GROUP_SEEN, GROUP_UNSEEN, Subset

CIFAR10_CLASSES = (
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
)
N_CLASSES = 10
N_SEEN = 5
TRAIN_PER_CLASS = 5000
TEST_PER_CLASS = 1000
NORMAL_TRAIN_FRACTION = 0.8
PARTITIONS = ("train", "val", "test")


def anomaly_classes(normal_class):
    """``(seen, unseen)`` anomaly class ids for ``normal_class`` (cyclic rule)."""
    if not 0 <= int(normal_class) < N_CLASSES:
        raise ConfigurationError("normal-class must be in 0..9")
    k = int(normal_class)
    seen = tuple((k + i) % N_CLASSES for i in range(1, N_SEEN + 1))
    unseen = tuple((k + i) % N_CLASSES for i in range(N_SEEN + 1, N_CLASSES))
    return seen, unseen


@dataclass(frozen=True)
class AnomalySplitSpec:
    normal_class: int
    seed: int = 0
    imbalance_ratio: int = 10

    def __post_init__(self):
        anomaly_classes(self.normal_class)
        if self.imbalance_ratio <= 0:
            raise ConfigurationError("imbalance_ratio must be positive")

    @property
    def seen_anomaly_classes(self):
        return anomaly_classes(self.normal_class)[0]

    @property
    def unseen_anomaly_classes(self):
        return anomaly_classes(self.normal_class)[1]


@dataclass
class ClassImageStore:
    """Raw images indexed by class: ``train[c]`` and ``test[c]`` are NHWC uint8."""

    train: dict
    test: dict

    @classmethod
    def from_arrays(cls, x_train, y_train, x_test, y_test):
        y_train = np.asarray(y_train).ravel()
        y_test = np.asarray(y_test).ravel()
        classes = sorted(set(y_train.tolist()) | set(y_test.tolist()))
        return cls(
            train={c: x_train[y_train == c] for c in classes},
            test={c: x_test[y_test == c] for c in classes},
        )

    def validate(self, n_train=TRAIN_PER_CLASS, n_test=TEST_PER_CLASS):
        if sorted(self.train) != list(range(N_CLASSES)) or sorted(self.test) != list(range(N_CLASSES)):
            raise ConfigurationError(
                f"source must provide exactly {N_CLASSES} classes, got train={sorted(self.train)} test={sorted(self.test)}"
            )
        for c in range(N_CLASSES):
            if len(self.train[c]) < n_train or len(self.test[c]) < n_test:
                raise ConfigurationError(
                    f"class {c} has {len(self.train[c])} train / {len(self.test[c])} test images; "
                    f"need {n_train} / {n_test}"
                )


def load_cifar10(root) -> ClassImageStore:
    """Read the python-pickle release (``data_batch_1..5`` and ``test_batch``)."""
    root = Path(root)
    if (root / "cifar-10-batches-py").is_dir():
        root = root / "cifar-10-batches-py"
    files = [root / f"data_batch_{i}" for i in range(1, 6)]
    missing = [str(f) for f in files + [root / "test_batch"] if not f.exists()]
    if missing:
        raise ConfigurationError(f"CIFAR-10 batches not found: {', '.join(missing)}")

    def read(path):
        with open(path, "rb") as fh:
            batch = pickle.load(fh, encoding="bytes")
        x = np.asarray(batch[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
        return x, np.asarray(batch[b"labels"])

    parts = [read(f) for f in files]
    x_train = np.concatenate([p[0] for p in parts])
    y_train = np.concatenate([p[1] for p in parts])
    x_test, y_test = read(root / "test_batch")
    return ClassImageStore.from_arrays(x_train, y_train, x_test, y_test)


@dataclass
class SplitManifest:
    """Reproducible description of a modified-CIFAR-10 split."""

    normal_class: int
    seed: int
    seen: tuple
    unseen: tuple
    entries: dict = field(default_factory=dict)  # partition -> list[(source, class, index)]

    def counts(self):
        out = {}
        for part, rows in self.entries.items():
            n_normal = sum(1 for _, c, _ in rows if c == self.normal_class)
            out[part] = {"normal": n_normal, "anomaly": len(rows) - n_normal}
        return out

    def to_json(self):
        doc = {
            "kind": "modified-cifar10",
            "normal_class": self.normal_class,
            "seed": self.seed,
            "seen_anomaly_classes": list(self.seen),
            "unseen_anomaly_classes": list(self.unseen),
            "counts": self.counts(),
            "entries": {p: [list(t) for t in self.entries[p]] for p in PARTITIONS},
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        return cls(
            normal_class=doc["normal_class"],
            seed=doc["seed"],
            seen=tuple(doc["seen_anomaly_classes"]),
            unseen=tuple(doc["unseen_anomaly_classes"]),
            entries={p: [tuple(t) for t in doc["entries"][p]] for p in PARTITIONS},
        )


def plan_modified_cifar10(normal_class, seed, n_train_per_class=TRAIN_PER_CLASS, n_test_per_class=TEST_PER_CLASS):
    """Choose which source images go where; pure function of its arguments."""
    spec = AnomalySplitSpec(int(normal_class), int(seed))
    seen, unseen = spec.seen_anomaly_classes, spec.unseen_anomaly_classes
    n_norm_train = int(round(n_train_per_class * NORMAL_TRAIN_FRACTION))
    n_norm_val = n_train_per_class - n_norm_train
    n_anom_train = n_norm_train // spec.imbalance_ratio
    n_anom_val = n_norm_val // spec.imbalance_ratio
    if n_anom_train % N_SEEN or n_anom_val % N_SEEN:
        raise ConfigurationError("anomaly counts must split evenly over the seen classes")
    per_train, per_val = n_anom_train // N_SEEN, n_anom_val // N_SEEN

    gen = seeding.rng(seed, "sampling")
    perm = gen.permutation(n_train_per_class)
    train = [("train", spec.normal_class, int(i)) for i in perm[:n_norm_train]]
    val = [("train", spec.normal_class, int(i)) for i in perm[n_norm_train:]]
    for c in seen:
        p = gen.permutation(n_train_per_class)
        train += [("train", c, int(i)) for i in p[:per_train]]
        val += [("train", c, int(i)) for i in p[per_train : per_train + per_val]]
    test = [("test", c, i) for c in range(N_CLASSES) for i in range(n_test_per_class)]
    return SplitManifest(spec.normal_class, spec.seed, seen, unseen, {"train": train, "val": val, "test": test})


@dataclass
class DatasetSplit:
    train: Subset
    val: Subset
    test: Subset
    manifest: SplitManifest = None


def materialize(manifest: SplitManifest, source: ClassImageStore) -> DatasetSplit:
    """Gather the pixels named by ``manifest`` from ``source``."""
    seen = set(manifest.seen)
    parts = {}
    for part in PARTITIONS:
        rows = manifest.entries[part]
        images = np.stack([getattr(source, src)[c][i] for src, c, i in rows]) if rows else None
        classes = np.array([c for _, c, _ in rows], dtype=np.int64)
        labels = (classes != manifest.normal_class).astype(np.int64)
        groups = np.where(
            classes == manifest.normal_class, GROUP_NORMAL, np.where(np.isin(classes, list(seen)), GROUP_SEEN, GROUP_UNSEEN)
        )
        parts[part] = Subset(images=images, labels=labels, groups=groups, provenance=classes)
    return DatasetSplit(parts["train"], parts["val"], parts["test"], manifest)


def build_modified_cifar10(normal_class, seed, source: ClassImageStore) -> DatasetSplit:
    source.validate()
    return materialize(plan_modified_cifar10(normal_class, seed), source)
