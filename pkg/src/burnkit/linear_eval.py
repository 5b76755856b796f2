"""Linear evaluation: a fresh linear classifier trained on frozen features."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .binary import BinarizeMode
from .checkpoint import tensors_digest
from .data import AugmentSpec, Dataset, iterate_plain
from .errors import ContractError, DataError
from .networks import BinaryExtractor
from .nn import Linear, Module
from .optim import SGD, LrSchedule
from .tensor import ParamGroup, Tensor, no_grad

RESULTS_HEADER = ("run_id", "pretrain_method", "probe_lr", "top1")


def topk_accuracy(logits: np.ndarray, labels: np.ndarray, k: int = 1) -> float:
    """Fraction of rows whose label is among the ``k`` largest logits.

    Ties are broken towards the lower class index, so a tied competitor with a
    smaller index outranks the true class.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ContractError(f"topk_accuracy needs [B, K] logits and [B] labels, got {logits.shape} and {labels.shape}")
    n_cls = logits.shape[1]
    if not 1 <= k <= n_cls:
        raise ContractError(f"k={k} outside [1, {n_cls}]")
    if labels.size == 0:
        return 0.0
    true = logits[np.arange(labels.size), labels][:, None]
    idx = np.arange(n_cls)[None, :]
    rank = np.sum((logits > true) | ((logits == true) & (idx < labels[:, None])), axis=1)
    return float(np.mean(rank < k))


def extract_features(extractor: Module, dataset: Dataset, batch_size: int = 256, aug: AugmentSpec | None = None) -> np.ndarray:
    """Eval-mode features for every image, in dataset order."""
    extractor.eval()
    chunks = []
    with no_grad():
        for x, _ in iterate_plain(dataset, batch_size, aug):
            chunks.append(extractor(Tensor(x)).data)
    if not chunks:
        return np.zeros((0, getattr(extractor, "out_dim", 0)), np.float32)
    return np.concatenate(chunks).astype(np.float32, copy=False)


@dataclass
class ProbeConfig:
    epochs: int = 30
    lr: float = 0.3
    momentum: float = 0.9
    batch_size: int = 128
    milestones: tuple[float, ...] = (0.6, 0.8)
    standardize: bool = True
    seed: int = 0


@dataclass
class ProbeResult:
    top1: float
    top5: float | None
    train_top1: float
    probe: Linear


def _check_labels(labels: np.ndarray, num_classes: int, what: str) -> None:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"{what} label {int(labels.max())} outside [0, {num_classes})")


def probe_features(
    train_x: np.ndarray,
    train_y: np.ndarray,
    test_x: np.ndarray,
    test_y: np.ndarray,
    num_classes: int,
    cfg: ProbeConfig = ProbeConfig(),
) -> ProbeResult:
    """Train a softmax-regression probe on fixed features and score it."""
    _check_labels(train_y, num_classes, "train")
    _check_labels(test_y, num_classes, "test")
    train_x = np.asarray(train_x, np.float32)
    test_x = np.asarray(test_x, np.float32)
    if cfg.standardize and len(train_x):
        mu = train_x.mean(axis=0)
        sd = train_x.std(axis=0) + 1e-6
        train_x = (train_x - mu) / sd
        test_x = (test_x - mu) / sd

    rng = np.random.default_rng([cfg.seed, 7])
    probe = Linear(train_x.shape[1], num_classes, rng, ParamGroup.FP_CLASSIFIER)
    opt = SGD(probe.parameters(), cfg.lr, cfg.momentum, weight_decay=0.0)
    steps_per_epoch = -(-len(train_x) // cfg.batch_size)
    sched = LrSchedule(cfg.lr, cfg.epochs, "step", cfg.milestones)
    for epoch in range(cfg.epochs):
        opt.lr = sched.at(epoch)
        order = rng.permutation(len(train_x))
        for s in range(steps_per_epoch):
            idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            opt.zero_grad()
            T.cross_entropy(probe(Tensor(train_x[idx])), train_y[idx]).backward()
            opt.step()

    with no_grad():
        test_logits = probe(Tensor(test_x)).data
        train_logits = probe(Tensor(train_x)).data
    top5 = topk_accuracy(test_logits, test_y, 5) if num_classes >= 5 else None
    return ProbeResult(topk_accuracy(test_logits, test_y, 1), top5, topk_accuracy(train_logits, train_y, 1), probe)


def linear_probe(
    extractor: Module,
    train: Dataset,
    test: Dataset,
    cfg: ProbeConfig = ProbeConfig(),
    aug: AugmentSpec | None = None,
) -> ProbeResult:
    """Probe a frozen extractor; raises if probing changed any extractor tensor."""
    _check_labels(train.labels, train.num_classes, "train")
    _check_labels(test.labels, train.num_classes, "test")
    before = tensors_digest(extractor.state_dict())
    result = probe_features(
        extract_features(extractor, train, aug=aug),
        train.labels.astype(np.int64),
        extract_features(extractor, test, aug=aug),
        test.labels.astype(np.int64),
        train.num_classes,
        cfg,
    )
    if tensors_digest(extractor.state_dict()) != before:
        raise ContractError("extractor tensors changed during linear probing")
    return result


def random_init_extractor(
    widths,
    in_channels: int,
    seed: int,
    calibrate_on: Dataset | None = None,
    mode: BinarizeMode = BinarizeMode.FULL_BINARY,
    calib_batches: int = 20,
    batch_size: int = 128,
    binary_stem: bool = True,
) -> BinaryExtractor:
    """Untrained binary extractor for the control baseline.

    With ``calibrate_on`` the batchnorm running statistics are re-estimated
    from train-mode forward passes (no weights change); otherwise eval mode
    would normalise with the initial mean 0 / var 1 buffers.
    """
    ext = BinaryExtractor(widths, in_channels, np.random.default_rng([seed, 2]), binary_stem=binary_stem)
    ext.assign_names("extractor.")
    ext.set_mode(mode)
    ext.set_group(ParamGroup.FROZEN)
    if calibrate_on is not None and len(calibrate_on):
        ext.train()
        with no_grad():
            for i, (x, _) in enumerate(iterate_plain(calibrate_on, batch_size)):
                if i >= calib_batches:
                    break
                ext(Tensor(x))
    return ext.eval()


def write_results(path: str | os.PathLike, rows) -> None:
    """``rows`` are (run_id, pretrain_method, probe_lr, top1) tuples."""
    with Path(path).open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(RESULTS_HEADER)
        for run_id, method, lr, top1 in rows:
            w.writerow([run_id, method, repr(float(lr)), repr(float(top1))])
