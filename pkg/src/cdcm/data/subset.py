"""In-memory labelled image collection shared by both datasets."""

from dataclasses import dataclass
from typing import Optional

import numpy as np

GROUP_NORMAL = "normal"
GROUP_SEEN = "seen_anomaly"
GROUP_UNSEEN = "unseen_anomaly"


@dataclass
class Subset:
    """Images plus per-sample labels (1 = anomaly).

    ``images`` is NHWC; uint8 storage is allowed to keep large slice sets in
    memory and is rescaled to [0, 1] by :meth:`as_float`. ``provenance`` holds
    the source class id (CIFAR) or patient id (slices); ``paths`` the slice
    file of each sample when loaded from disk.
    """

    images: np.ndarray
    labels: np.ndarray
    groups: Optional[np.ndarray] = None
    provenance: Optional[np.ndarray] = None
    paths: Optional[np.ndarray] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images is not None and len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.groups is None:
            self.groups = np.where(self.labels == 1, GROUP_SEEN, GROUP_NORMAL)

    def __len__(self):
        return len(self.labels)

    @property
    def n_normal(self):
        return int(np.sum(self.labels == 0))

    @property
    def n_anomaly(self):
        return int(np.sum(self.labels == 1))

    def as_float(self, idx=None):
        x = self.images if idx is None else self.images[idx]
        if x.dtype == np.uint8:
            return x.astype(np.float32) / 255.0
        return x.astype(np.float32, copy=False)

    def take(self, idx):
        idx = np.asarray(idx)

        def pick(a):
            return None if a is None else a[idx]

        return Subset(pick(self.images), self.labels[idx], pick(self.groups), pick(self.provenance), pick(self.paths))
