"""Scene state: static 3D Gaussians, dynamic 4D Gaussians bound to the motion
field, and the sky model.

Trainable parameterization (standard splatting practice): scales live in log
space, opacity as a logit; quaternions are stored raw and renormalized inside
every forward pass, whose backward is exactly the tangent-space projection.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .rasterizer import SkyModel
from .sh import N_SH_COEFFS


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


PARAM_FIELDS = ("pos", "quat", "log_scale", "opacity_logit", "sh")


@dataclass
class GaussianGroup:
    """Struct-of-arrays over one set of Gaussians (static or dynamic)."""
    pos: np.ndarray            # (N, 3) world, at the canonical frame for dynamics
    quat: np.ndarray           # (N, 4) raw (x, y, z, w)
    log_scale: np.ndarray      # (N, 3)
    opacity_logit: np.ndarray  # (N,)
    sh: np.ndarray             # (N, 16, 3)

    @classmethod
    def empty(cls):
        return cls(pos=np.zeros((0, 3)), quat=np.zeros((0, 4)),
                   log_scale=np.zeros((0, 3)), opacity_logit=np.zeros(0),
                   sh=np.zeros((0, N_SH_COEFFS, 3)))

    @classmethod
    def from_points(cls, points, scales, colors_dc, opacity=0.1):
        n = points.shape[0]
        quat = np.zeros((n, 4))
        quat[:, 3] = 1.0
        sh = np.zeros((n, N_SH_COEFFS, 3))
        sh[:, 0, :] = colors_dc
        return cls(pos=np.asarray(points, dtype=np.float64).copy(),
                   quat=quat,
                   log_scale=np.log(np.asarray(scales, dtype=np.float64)),
                   opacity_logit=np.full(n, float(logit(opacity))),
                   sh=sh)

    @property
    def count(self):
        return self.pos.shape[0]

    def scales(self):
        return np.exp(self.log_scale)

    def opacities(self):
        return sigmoid(self.opacity_logit)

    def select(self, mask):
        return GaussianGroup(pos=self.pos[mask], quat=self.quat[mask],
                             log_scale=self.log_scale[mask],
                             opacity_logit=self.opacity_logit[mask],
                             sh=self.sh[mask])

    def concat(self, other):
        return GaussianGroup(
            pos=np.concatenate([self.pos, other.pos]),
            quat=np.concatenate([self.quat, other.quat]),
            log_scale=np.concatenate([self.log_scale, other.log_scale]),
            opacity_logit=np.concatenate([self.opacity_logit, other.opacity_logit]),
            sh=np.concatenate([self.sh, other.sh]))


@dataclass
class GaussianScene:
    """Static + dynamic Gaussian sets and the sky model.

    Dynamic Gaussians are anchored at `canonical_frame` (the first frame) and
    reach other timestamps through the motion field.
    """
    static: GaussianGroup
    dynamic: GaussianGroup
    sky: SkyModel = field(default_factory=SkyModel)
    canonical_frame: int = 0

    @property
    def total(self):
        return self.static.count + self.dynamic.count

    def validate(self):
        if self.total == 0:
            raise ValidationError("scene has no Gaussians")
        for grp in (self.static, self.dynamic):
            if not all(np.all(np.isfinite(getattr(grp, f))) for f in PARAM_FIELDS):
                raise ValidationError("scene parameters contain non-finite values")
        return self
