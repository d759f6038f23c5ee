"""Random affine augmentation: rotation, shift, shear and zoom.

Each image gets its own transform. Out-of-frame pixels replicate the nearest
border pixel, so constant images stay constant under any transform.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class AugmentParams:
    """Ranges sampled uniformly per image.

    rotation/shear in degrees (+-), shift as a fraction of width/height (+-),
    zoom as a relative scale (1 +- zoom, independently per axis).
    """

    rotation: float = 15.0
    shift: float = 0.1
    shear: float = 10.0
    zoom: float = 0.1

    @property
    def is_identity(self):
        return not (self.rotation or self.shift or self.shear or self.zoom)

    def to_dict(self):
        return asdict(self)


NO_AUGMENT = AugmentParams(0.0, 0.0, 0.0, 0.0)


def sample_affine(n, rng: np.random.Generator, params: AugmentParams) -> np.ndarray:
    """(n, 2, 3) matrices in normalised grid coordinates (output -> input)."""
    rot = np.deg2rad(rng.uniform(-params.rotation, params.rotation, n))
    shear = np.deg2rad(rng.uniform(-params.shear, params.shear, n))
    tx = rng.uniform(-params.shift, params.shift, n) * 2.0
    ty = rng.uniform(-params.shift, params.shift, n) * 2.0
    zx = rng.uniform(1 - params.zoom, 1 + params.zoom, n)
    zy = rng.uniform(1 - params.zoom, 1 + params.zoom, n)
    theta = np.zeros((n, 2, 3))
    for i in range(n):
        c, s = math.cos(rot[i]), math.sin(rot[i])
        rotation = np.array([[c, -s], [s, c]])
        shearing = np.array([[1.0, -math.sin(shear[i])], [0.0, math.cos(shear[i])]])
        zoom = np.diag([zx[i], zy[i]])
        theta[i, :, :2] = rotation @ shearing @ zoom
        theta[i, :, 2] = (tx[i], ty[i])
    return theta


def augment_tensor(x: torch.Tensor, rng: np.random.Generator, params: AugmentParams) -> torch.Tensor:
    """Augment an NCHW float batch; returns a new tensor clipped to [0, 1]."""
    if params.is_identity or x.shape[0] == 0:
        return x
    theta = torch.as_tensor(sample_affine(x.shape[0], rng, params), dtype=x.dtype, device=x.device)
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    out = F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)
    return out.clamp_(0.0, 1.0)


def augment(images, seed, params: AugmentParams = AugmentParams()) -> np.ndarray:
    """Augment an NHWC batch with values in [0, 1]; deterministic given ``seed``.

    Labels and sample order are untouched by construction.
    """
    images = np.asarray(images)
    if params.is_identity:
        return images.copy()
    x = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32)).permute(0, 3, 1, 2)
    out = augment_tensor(x, np.random.default_rng(seed), params)
    return out.permute(0, 2, 3, 1).numpy()
