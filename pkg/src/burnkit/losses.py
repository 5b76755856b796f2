"""The BURN objective and its ablation variants.

    total = (1 - lambda(t)) * KL(p2 || p1) + lambda(t) * FS(v1, v2)

KL is taken with the binary network's distribution first and is
differentiable in both arguments, so the FP classifier is trained by the
same loss.  FS is the cosine distance by default; L1/L2 are available for
comparison.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

LOG_FLOOR = 1e-12
NORM_GUARD = 1e-12
ROW_SUM_TOL = 1e-5


class ScheduleShape(enum.Enum):
    COSINE_ANNEAL = "cosine"
    CONSTANT = "constant"
    HEAVISIDE_STEP = "heaviside"


class FsVariant(enum.Enum):
    COSINE = "cosine"
    L1 = "l1"
    L2 = "l2"


@dataclass(frozen=True)
class LambdaSchedule:
    lambda0: float = 0.9
    lambda_tmax: float = 0.7
    t_max: int = 1
    shape: ScheduleShape = ScheduleShape.COSINE_ANNEAL

    def __post_init__(self):
        for v in (self.lambda0, self.lambda_tmax):
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"lambda values must lie in [0, 1], got {v}")
        if self.t_max < 1:
            raise ContractError(f"t_max must be positive, got {self.t_max}")


def lambda_at(s: LambdaSchedule, t: int) -> np.float32:
    if not 0 <= t <= s.t_max:
        raise ContractError(f"t={t} outside [0, {s.t_max}]")
    if s.shape is ScheduleShape.CONSTANT:
        value = s.lambda0
    elif s.shape is ScheduleShape.HEAVISIDE_STEP:
        value = s.lambda0 if t < s.t_max / 2 else s.lambda_tmax
    else:
        value = s.lambda_tmax - (s.lambda_tmax - s.lambda0) * (math.cos(math.pi * t / s.t_max) + 1) / 2
    return np.float32(value)


def _check_probs(p: Tensor, name: str) -> None:
    d = p.data
    if d.ndim != 2:
        raise DimensionError(f"{name} must be [B, K], got {d.shape}")
    if np.any(d < 0) or np.any(np.abs(d.sum(axis=1, dtype=np.float64) - 1.0) > ROW_SUM_TOL):
        raise ContractError(f"{name} rows must be probability distributions (sum to 1 +- {ROW_SUM_TOL})")


def kl_div(p2: Tensor, p1: Tensor) -> Tensor:
    """Batch mean of sum_k p2 * (log p2 - log p1), with a 1e-12 floor inside the logs."""
    if p2.shape != p1.shape:
        raise DimensionError(f"kl_div operands differ in shape: {p2.shape} vs {p1.shape}")
    _check_probs(p2, "p2")
    _check_probs(p1, "p1")
    log_ratio = T.log(p2 + LOG_FLOOR) - T.log(p1 + LOG_FLOOR)
    return (p2 * log_ratio).sum() * (1.0 / p2.shape[0])


def feature_similarity(v1: Tensor, v2: Tensor, variant: FsVariant = FsVariant.COSINE) -> Tensor:
    """Per-sample distance between feature rows, averaged over the batch.

    For the cosine variant each norm is floored at 1e-12 so an all-zero row
    gives distance 1 instead of dividing by zero.
    """
    if v1.shape != v2.shape or v1.ndim != 2:
        raise DimensionError(f"feature_similarity needs matching [B, D] inputs, got {v1.shape} and {v2.shape}")
    b = v1.shape[0]
    if variant is FsVariant.COSINE:
        cos = T.dot(v1, v2) / (T.l2_norm(v1, eps=NORM_GUARD) * T.l2_norm(v2, eps=NORM_GUARD))
        return (1.0 - cos).sum() * (1.0 / b)
    diff = v1 - v2
    if variant is FsVariant.L1:
        return T.abs_(diff).sum() * (1.0 / b)
    return T.l2_norm(diff, axis=1).sum() * (1.0 / b)


def mix(loss_kl: Tensor, loss_fs: Tensor, lam: float) -> Tensor:
    lam = float(lam)
    return loss_kl * (1.0 - lam) + loss_fs * lam


@dataclass
class LossReport:
    iter: int
    stage: int
    lam: float
    loss_kl: float
    loss_fs: float
    loss_total: float
    gnorms: dict[str, float] = field(default_factory=dict)

    CSV_HEADER = (
        "iter,stage,lambda,loss_kl,loss_fs,loss_total,"
        "gnorm_fp_classifier,gnorm_bin_extractor,gnorm_bin_classifier"
    )

    def csv_row(self) -> str:
        g = self.gnorms
        fields = [
            str(self.iter),
            str(self.stage),
            repr(float(self.lam)),
            repr(self.loss_kl),
            repr(self.loss_fs),
            repr(self.loss_total),
            repr(g.get("fp_classifier", 0.0)),
            repr(g.get("bin_extractor", 0.0)),
            repr(g.get("bin_classifier", 0.0)),
        ]
        return ",".join(fields)


def burn_objective(
    p1: Tensor,
    p2: Tensor,
    v1: Tensor,
    v2: Tensor,
    t: int,
    schedule: LambdaSchedule,
    variant: FsVariant = FsVariant.COSINE,
    use_fs_loss: bool = True,
    stage: int = 0,
) -> tuple[Tensor, LossReport]:
    """``(1 - lambda(t)) * kl_div(p2, p1) + lambda(t) * feature_similarity(v1, v2)``.

    With ``use_fs_loss=False`` lambda is pinned to 0 (pure KL); the FS term
    is still evaluated so the report stays comparable across runs.
    """
    lam = lambda_at(schedule, t) if use_fs_loss else np.float32(0.0)
    l_kl = kl_div(p2, p1)
    l_fs = feature_similarity(v1, v2, variant)
    total = mix(l_kl, l_fs, lam) if use_fs_loss else l_kl
    report = LossReport(t, stage, float(lam), l_kl.item(), l_fs.item(), total.item())
    return total, report
