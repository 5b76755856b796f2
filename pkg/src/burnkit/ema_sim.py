"""Toy backbone/target EMA simulation in FP and binary modes.

Each step the backbone takes a random step and the target tracks it with an
exponential moving average::

    backbone <- backbone + eta * n,   n ~ N(0, I)
    target   <- tau * target + (1 - tau) * backbone

The dynamics always run on f32 latent vectors.  The reported distance is

* binary: ``||sign(b) - sign(t)||``, i.e. on the binarised vectors;
* FP: ``||s(b) - s(t)||`` with ``s(v) = sqrt(dim) * v / ||v||``, which puts
  the FP vectors on the same sphere (norm sqrt(dim)) as the +-1 vectors.

The raw ``||b - t||`` grows with the random walk's magnitude (hundreds at
the defaults) while sign vectors are bounded by ``2 sqrt(dim)``, so the two
modes are only comparable at matched scale; ``fp_scale="raw"`` gives the
unscaled norm.
"""

from __future__ import annotations

import csv
import enum
import io
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .binary import sign


class SimMode(enum.Enum):
    FP = "fp"
    BINARY = "binary"


@dataclass(frozen=True)
class EmaSimConfig:
    dim: int = 100
    eta: float = 4.8
    tau: float = 0.99
    iters: int = 100
    runs: int = 10
    mode: SimMode = SimMode.BINARY
    seed: int = 0
    fp_scale: str = "matched"

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if self.dim < 1 or self.runs < 1 or self.iters < 0:
            raise ValueError("dim and runs must be >= 1 and iters >= 0")
        if self.fp_scale not in ("matched", "raw"):
            raise ValueError(f"fp_scale must be 'matched' or 'raw', got {self.fp_scale!r}")


def ema_step(backbone: np.ndarray, target: np.ndarray, eta: float, tau: float, rng: np.random.Generator | None = None, noise: np.ndarray | None = None):
    """One update; the target averages in the *new* backbone."""
    if backbone.shape != target.shape:
        raise ValueError(f"backbone {backbone.shape} and target {target.shape} differ")
    if noise is None:
        noise = rng.standard_normal(backbone.shape).astype(np.float32)
    new_b = (backbone + np.float32(eta) * noise).astype(np.float32)
    new_t = (np.float32(tau) * target + np.float32(1.0 - tau) * new_b).astype(np.float32)
    return new_b, new_t


def _to_sphere(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v.astype(np.float64))
    return np.sqrt(v.size) * v.astype(np.float64) / n if n > 0 else np.zeros(v.shape)


def distance(backbone: np.ndarray, target: np.ndarray, mode: SimMode, fp_scale: str = "matched") -> float:
    if backbone.shape != target.shape:
        raise ValueError(f"backbone {backbone.shape} and target {target.shape} differ")
    if mode is SimMode.BINARY:
        d = sign(backbone).astype(np.float64) - sign(target).astype(np.float64)
    elif fp_scale == "raw":
        d = backbone.astype(np.float64) - target.astype(np.float64)
    else:
        d = _to_sphere(backbone) - _to_sphere(target)
    return float(np.sqrt(np.sum(d * d)))


@dataclass
class EmaTrace:
    mode: SimMode
    distances: np.ndarray  # [runs, iters + 1]

    @property
    def mean(self) -> np.ndarray:
        return self.distances.mean(axis=0)

    @property
    def std(self) -> np.ndarray:
        """Sample standard deviation across runs (0 with a single run)."""
        if self.distances.shape[0] < 2:
            return np.zeros(self.distances.shape[1])
        return self.distances.std(axis=0, ddof=1)

    def runs_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mode", "run", "iter", "distance"])
        for r, row in enumerate(self.distances):
            for i, d in enumerate(row):
                w.writerow([self.mode.value, r, i, repr(float(d))])
        return buf.getvalue()

    def aggregate_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mode", "iter", "mean", "std"])
        for i, (m, s) in enumerate(zip(self.mean, self.std)):
            w.writerow([self.mode.value, i, repr(float(m)), repr(float(s))])
        return buf.getvalue()

    def write(self, path: str | os.PathLike) -> Path:
        """Per-run CSV at ``path`` and the aggregate beside it (``<stem>_agg.csv``)."""
        path = Path(path)
        path.write_text(self.runs_csv(), encoding="utf-8")
        agg = path.with_name(path.stem + "_agg" + path.suffix)
        agg.write_text(self.aggregate_csv(), encoding="utf-8")
        return agg


def run_sim(cfg: EmaSimConfig) -> EmaTrace:
    """``runs`` independent trajectories; run r draws from the stream (seed, r).

    Backbone and target start from the same standard-normal vector, so the
    iteration-0 distance is exactly zero.
    """
    out = np.zeros((cfg.runs, cfg.iters + 1))
    for r in range(cfg.runs):
        rng = np.random.default_rng([cfg.seed, r])
        b = rng.standard_normal(cfg.dim).astype(np.float32)
        t = b.copy()
        for i in range(1, cfg.iters + 1):
            b, t = ema_step(b, t, cfg.eta, cfg.tau, rng)
            out[r, i] = distance(b, t, cfg.mode, cfg.fp_scale)
    return EmaTrace(cfg.mode, out)
