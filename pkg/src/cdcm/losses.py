"""Center-based contrastive metric loss (cDCM) and the baseline objectives.

All losses are written against torch tensors so they can be back-propagated
through a network; plain sequences and numpy arrays are accepted as well and
are promoted to float64 tensors.

Two normalisation conventions coexist here and are easy to mix up:

* ``cdcm_loss`` averages the normal term over the normals of the batch and the
  anomaly term over the anomalies of the batch (two separate means).
* ``deep_sad_loss`` divides the summed per-sample terms by the *total* batch
  size, as in the original Deep SAD objective.
"""

from dataclasses import asdict, dataclass
from enum import Enum
from typing import Optional

import numpy as np
import torch

from .errors import ConfigurationError, EmptyBatchError, SingularityError

PROB_EPS = 1e-7
SINGULARITY_EPS = 1e-12


class LossFamily(str, Enum):
    CDCM = "cdcm"
    DEEP_SAD = "deep_sad"
    BCE = "bce"
    WBCE = "wbce"
    FOCAL = "focal"

    @property
    def is_metric(self):
        """True for losses defined on distances to a center (metric head)."""
        return self in (LossFamily.CDCM, LossFamily.DEEP_SAD)


@dataclass(frozen=True)
class LossConfig:
    """Hyper-parameters of one loss family.

    ``alpha`` and ``eta`` both default to 5: the hyper-parameter table lists a
    "theta 5" that is not otherwise defined, and we read it as the anomaly
    weight. That reading is an assumption.
    """

    family: LossFamily = LossFamily.CDCM
    center: Optional[tuple] = None
    margin: float = 5.0
    alpha: float = 5.0
    eta: float = 5.0
    pos_weight: float = 10.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "family", LossFamily(self.family))
        if self.center is not None:
            object.__setattr__(self, "center", tuple(float(v) for v in np.ravel(self.center)))
        fam = self.family
        if fam.is_metric:
            if self.center is None or len(self.center) == 0:
                raise ConfigurationError(f"{fam.value} loss needs a center vector")
            if not np.all(np.isfinite(self.center)):
                raise ConfigurationError("center must be finite")
        if fam is LossFamily.CDCM:
            if not self.margin > 0:
                raise ConfigurationError("margin must be > 0")
            if not self.alpha > 0:
                raise ConfigurationError("alpha must be > 0")
        elif fam is LossFamily.DEEP_SAD:
            if not self.eta > 0:
                raise ConfigurationError("eta must be > 0")
        elif fam is LossFamily.WBCE:
            if not self.pos_weight > 0:
                raise ConfigurationError("pos_weight must be > 0")
        elif fam is LossFamily.FOCAL:
            if not self.focal_gamma >= 0:
                raise ConfigurationError("focal_gamma must be >= 0")
            if not 0 < self.focal_alpha < 1:
                raise ConfigurationError("focal_alpha must be in (0, 1)")

    @property
    def latent_dim(self):
        return None if self.center is None else len(self.center)

    def center_tensor(self, dtype=torch.float32, device="cpu"):
        return torch.tensor(self.center, dtype=dtype, device=device)

    def to_dict(self):
        d = asdict(self)
        d["family"] = self.family.value
        d["center"] = None if self.center is None else list(self.center)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def make_center(kind, dim, seed=0):
    """Center vector of length ``dim``: ``zeros``, ``ones`` or ``random``.

    ``random`` draws each coordinate uniformly from [0, 1).
    """
    if kind in ("zeros", "zero", "all-0"):
        return np.zeros(dim)
    if kind in ("ones", "one", "all-1"):
        return np.ones(dim)
    if kind in ("random", "uniform"):
        return np.random.default_rng(seed).uniform(0.0, 1.0, size=dim)
    raise ConfigurationError(f"unknown center kind {kind!r} (expected zeros, ones or random)")


def _as_tensor(x, dtype=None):
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype or torch.float64)


def _check_labeled(values, labels, what="distances"):
    values = _as_tensor(values)
    labels = _as_tensor(labels, dtype=values.dtype).to(values.device)
    if values.ndim != 1 or labels.ndim != 1 or values.shape[0] != labels.shape[0]:
        raise ConfigurationError(
            f"{what} and labels must be 1-D of equal length, got {tuple(values.shape)} and {tuple(labels.shape)}"
        )
    if values.shape[0] == 0:
        raise EmptyBatchError("batch contains no samples")
    return values, labels


def euclidean_distances(latent, center):
    """Row-wise Euclidean distance between ``latent`` (n, D) and ``center`` (D,)."""
    latent = _as_tensor(latent)
    center = _as_tensor(center, dtype=latent.dtype).to(latent.device)
    if latent.ndim != 2 or center.ndim != 1 or latent.shape[1] != center.shape[0]:
        raise ConfigurationError(
            f"latent width {tuple(latent.shape)} does not match center length {tuple(center.shape)}"
        )
    return torch.linalg.vector_norm(latent - center, dim=1)


def cdcm_loss(distances, labels, margin=5.0, alpha=5.0):
    """cDCM loss on per-sample distances.

    ``mean_{y=0}(d) + mean_{y=1}(alpha * (relu(m - d) + sigmoid(m - d)))``.
    A term whose class is absent from the batch contributes 0.
    """
    d, y = _check_labeled(distances, labels)
    normal = y == 0
    anomaly = ~normal
    n_normal = int(normal.sum())
    n_anomaly = int(anomaly.sum())
    loss = d.new_zeros(())
    if n_normal:
        loss = loss + d[normal].sum() / n_normal
    if n_anomaly:
        da = d[anomaly]
        # relu has zero derivative at the kink d == m
        per = torch.relu(margin - da) + torch.sigmoid(margin - da)
        loss = loss + alpha * per.sum() / n_anomaly
    return loss


def cdcm_distance_grad(distances, labels, margin=5.0, alpha=5.0):
    """Closed-form d(cdcm_loss)/d(distances), written out independently of autograd."""
    d = np.asarray(distances, dtype=np.float64)
    y = np.asarray(labels)
    n_normal = int(np.sum(y == 0))
    n_anomaly = int(np.sum(y == 1))
    grad = np.zeros_like(d)
    if n_normal:
        grad[y == 0] = 1.0 / n_normal
    if n_anomaly:
        da = d[y == 1]
        s = 1.0 / (1.0 + np.exp(da - margin))
        hinge = np.where(da < margin, -1.0, 0.0)
        grad[y == 1] = alpha * (hinge - s * (1.0 - s)) / n_anomaly
    return grad


def deep_sad_loss(distances, labels, eta=5.0):
    """Deep SAD objective: ``(sum_{y=0} d^2 + eta * sum_{y=1} d^-2) / n``.

    Normalised by the total batch size ``n``. Raises :class:`SingularityError`
    if an anomaly sits (numerically) on the center.
    """
    d, y = _check_labeled(distances, labels)
    anomaly = y == 1
    if bool(anomaly.any()) and float(d[anomaly].min()) <= SINGULARITY_EPS:
        raise SingularityError("Deep SAD loss is unbounded for an anomaly at distance 0")
    sq = d * d
    terms = torch.where(anomaly, eta / torch.where(anomaly, sq, torch.ones_like(sq)), sq)
    return terms.sum() / d.shape[0]


def _clamped(probs, labels):
    p, y = _check_labeled(probs, labels, what="probabilities")
    return p.clamp(PROB_EPS, 1.0 - PROB_EPS), y


def bce_loss(probs, labels):
    p, y = _clamped(probs, labels)
    return -(y * torch.log(p) + (1 - y) * torch.log1p(-p)).mean()


def wbce_loss(probs, labels, pos_weight=10.0):
    """BCE with the positive (anomaly) term scaled by ``pos_weight``."""
    p, y = _clamped(probs, labels)
    return -(pos_weight * y * torch.log(p) + (1 - y) * torch.log1p(-p)).mean()


def focal_loss(probs, labels, focal_alpha=0.25, focal_gamma=2.0):
    p, y = _clamped(probs, labels)
    p_t = torch.where(y == 1, p, 1 - p)
    alpha_t = torch.where(y == 1, torch.full_like(p, focal_alpha), torch.full_like(p, 1 - focal_alpha))
    return (-alpha_t * (1 - p_t) ** focal_gamma * torch.log(p_t)).mean()


def compute_loss(cfg: LossConfig, outputs, labels, center: Optional[torch.Tensor] = None):
    """Evaluate ``cfg``'s loss on raw network outputs.

    Metric families take latent rows (n, D); CE families take probabilities
    shaped (n,) or (n, 1).
    """
    fam = cfg.family
    if fam.is_metric:
        if center is None:
            center = cfg.center_tensor(dtype=outputs.dtype, device=outputs.device)
        d = euclidean_distances(outputs, center)
        if fam is LossFamily.CDCM:
            return cdcm_loss(d, labels, cfg.margin, cfg.alpha)
        return deep_sad_loss(d, labels, cfg.eta)
    probs = outputs.reshape(-1)
    if fam is LossFamily.BCE:
        return bce_loss(probs, labels)
    if fam is LossFamily.WBCE:
        return wbce_loss(probs, labels, cfg.pos_weight)
    return focal_loss(probs, labels, cfg.focal_alpha, cfg.focal_gamma)

