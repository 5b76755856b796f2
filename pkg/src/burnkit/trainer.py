"""Two-stage BURN pretraining with gradient telemetry, plus supervised teacher pretraining.

Config files are flat UTF-8 ``key = value`` text; ``#`` starts a comment.
Recognised keys are the fields of :class:`BurnConfig`:

    seed, iters, stage1_iters, stage2_iters, batch_size,
    optimizer (sgd|adam), lr, lr_decay (cosine|step|constant), momentum,
    adam_beta1, adam_beta2, weight_decay_stage1, weight_decay_stage2,
    lambda0, lambda_tmax, lambda_shape (cosine|constant|heaviside),
    fs_variant (cosine|l1|l2), use_fs_loss, use_dynamic_lambda, use_multistage,
    theta_lr_scale (FP classifier lr as a fraction of lr), num_classes,
    student_widths (comma separated), binary_stem, checkpoint_every,
    crop_padding, flip_prob

``stage1_iters``/``stage2_iters`` default to an even split of ``iters``.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import TextIO

import numpy as np

from . import tensor as T
from .binary import BinarizeMode
from .checkpoint import Checkpoint
from .data import AugmentSpec, Batcher, Dataset, iterate_plain
from .errors import ConfigError, ContractError, NumericAbort
from .linear_eval import topk_accuracy
from .losses import FsVariant, LambdaSchedule, LossReport, ScheduleShape, burn_objective
from .networks import (
    BinaryStudent,
    FpTeacher,
    NetConfig,
    build_fp_extractor,
    build_teacher,
    extractor_checkpoint,
    forward_pair,
    make_student,
    teacher_config_from_checkpoint,
)
from .nn import Linear
from .optim import LrSchedule, make_optimizer
from .tensor import ParamGroup, Tensor, no_grad

GROUP_KEYS = (ParamGroup.FP_CLASSIFIER, ParamGroup.BINARY_EXTRACTOR, ParamGroup.BINARY_CLASSIFIER)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    """Settings for one pretraining stage."""

    stage: BinarizeMode = BinarizeMode.ACTIVATIONS_ONLY
    iters: int = 500
    batch_size: int = 64
    optimizer: str = "adam"
    lr: float = 1e-3
    lr_decay: str = "cosine"
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-5
    seed: int = 0
    lambda0: float = 0.9
    lambda_tmax: float = 0.7
    lambda_shape: ScheduleShape = ScheduleShape.COSINE_ANNEAL
    fs_variant: FsVariant = FsVariant.COSINE
    use_fs_loss: bool = True
    use_dynamic_lambda: bool = True
    checkpoint_every: int = 0
    theta_lr_scale: float = 1e-3

    def schedule(self) -> LambdaSchedule:
        """The lambda schedule over this stage; the last step sees lambda(T_max)."""
        shape = self.lambda_shape if self.use_dynamic_lambda else ScheduleShape.CONSTANT
        return LambdaSchedule(self.lambda0, self.lambda_tmax, max(self.iters - 1, 1), shape)


@dataclass
class BurnConfig:
    seed: int = 0
    iters: int = 1200
    stage1_iters: int | None = None
    stage2_iters: int | None = None
    batch_size: int = 64
    optimizer: str = "adam"
    lr: float = 1e-3
    lr_decay: str = "cosine"
    momentum: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay_stage1: float = 1e-5
    weight_decay_stage2: float = 0.0
    lambda0: float = 0.9
    lambda_tmax: float = 0.7
    lambda_shape: ScheduleShape = ScheduleShape.COSINE_ANNEAL
    fs_variant: FsVariant = FsVariant.COSINE
    use_fs_loss: bool = True
    use_dynamic_lambda: bool = True
    use_multistage: bool = True
    theta_lr_scale: float = 1e-3
    num_classes: int = 100
    student_widths: tuple[int, ...] = (16, 32, 64, 64)
    binary_stem: bool = True
    checkpoint_every: int = 0
    crop_padding: int = 4
    flip_prob: float = 0.5

    def __post_init__(self):
        if self.iters < 0 or self.batch_size < 1 or self.num_classes < 1:
            raise ConfigError("iters must be >= 0, batch_size and num_classes >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.lr_decay not in ("cosine", "step", "constant"):
            raise ConfigError(f"lr_decay must be cosine, step or constant, got {self.lr_decay!r}")
        if not self.student_widths:
            raise ConfigError("student_widths must list at least one block width")

    def split(self) -> tuple[int, int]:
        s1 = self.iters // 2 if self.stage1_iters is None else self.stage1_iters
        s2 = self.iters - s1 if self.stage2_iters is None else self.stage2_iters
        return s1, s2

    def augment(self) -> AugmentSpec:
        return AugmentSpec(crop_padding=self.crop_padding, flip_prob=self.flip_prob)

    def stage_configs(self) -> list[TrainConfig]:
        """Stage-1 then stage-2 settings, or a single FullBinary stage without multi-stage training."""
        common = dict(
            batch_size=self.batch_size,
            optimizer=self.optimizer,
            lr=self.lr,
            lr_decay=self.lr_decay,
            momentum=self.momentum,
            betas=(self.adam_beta1, self.adam_beta2),
            seed=self.seed,
            lambda0=self.lambda0,
            lambda_tmax=self.lambda_tmax,
            lambda_shape=self.lambda_shape,
            fs_variant=self.fs_variant,
            use_fs_loss=self.use_fs_loss,
            use_dynamic_lambda=self.use_dynamic_lambda,
            checkpoint_every=self.checkpoint_every,
            theta_lr_scale=self.theta_lr_scale,
        )
        s1, s2 = self.split()
        if not self.use_multistage:
            return [TrainConfig(BinarizeMode.FULL_BINARY, s1 + s2, weight_decay=self.weight_decay_stage2, **common)]
        return [
            TrainConfig(BinarizeMode.ACTIVATIONS_ONLY, s1, weight_decay=self.weight_decay_stage1, **common),
            TrainConfig(BinarizeMode.FULL_BINARY, s2, weight_decay=self.weight_decay_stage2, **common),
        ]

    def with_ablations(self, ablations) -> "BurnConfig":
        flags = {"no-fs": "use_fs_loss", "no-dyn": "use_dynamic_lambda", "no-mst": "use_multistage"}
        changes = {}
        for a in ablations:
            if a not in flags:
                raise ConfigError(f"unknown ablation {a!r}; expected one of {sorted(flags)}")
            changes[flags[a]] = False
        return dataclasses.replace(self, **changes)


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def _coerce(name: str, kind, value):
    if not isinstance(value, str):
        return value
    try:
        if kind is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind in (ScheduleShape, FsVariant):
            return kind(value.lower())
        if kind == "widths":
            return tuple(int(v) for v in value.split(",") if v.strip())
        if kind == "optint":
            return None if value.lower() in ("", "none") else int(value)
        return kind(value)
    except ValueError:
        raise ConfigError(f"invalid value {value!r} for config key {name!r}") from None


_KINDS = {
    "stage1_iters": "optint",
    "stage2_iters": "optint",
    "student_widths": "widths",
    "lambda_shape": ScheduleShape,
    "fs_variant": FsVariant,
}


def config_from_mapping(values: dict, base: BurnConfig | None = None) -> BurnConfig:
    base = base or BurnConfig()
    known = {f.name: f for f in dataclasses.fields(BurnConfig)}
    changes = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        kind = _KINDS.get(key) or type(getattr(BurnConfig(), key))
        changes[key] = _coerce(key, kind, value)
    return dataclasses.replace(base, **changes)


def load_config(path: str | os.PathLike | None, overrides: dict | None = None) -> BurnConfig:
    """File values first, then ``overrides`` (e.g. from the command line) on top."""
    cfg = BurnConfig()
    if path is not None:
        cfg = config_from_mapping(parse_config_text(Path(path).read_text(encoding="utf-8")), cfg)
    return config_from_mapping(overrides or {}, cfg)


# ---------------------------------------------------------------------------
# telemetry


def trainable_parameters(student: BinaryStudent, teacher: FpTeacher):
    """theta then phi; the frozen teacher extractor is never included."""
    return teacher.classifier.parameters() + student.parameters()


def grad_group_norms(student: BinaryStudent, teacher: FpTeacher) -> dict[str, float]:
    """L2 norm of the concatenated gradients of each parameter group (f64 accumulation).

    Parameters the loss did not reach (grad None) count as zero; a
    ContractError is raised only if no parameter has a gradient at all.
    """
    sums = {g: 0.0 for g in GROUP_KEYS}
    seen = False
    for p in trainable_parameters(student, teacher):
        if p.group not in sums or p.grad is None:
            continue
        seen = True
        sums[p.group] += float(np.sum(np.square(p.grad, dtype=np.float64)))
    if not seen:
        raise ContractError("no parameter has a gradient; call backward() first")
    return {g.value: math.sqrt(s) for g, s in sums.items()}


def _first_nonfinite(named) -> str | None:
    for name, arr in named:
        if arr is not None and not np.all(np.isfinite(arr)):
            return name
    return None


# ---------------------------------------------------------------------------
# training


def stage_checkpoint(teacher: FpTeacher, student: BinaryStudent, stage: int, iteration: int, seed: int) -> Checkpoint:
    tensors = {"student." + k: v for k, v in student.state_dict().items()}
    tensors.update({"fp_classifier." + k: v for k, v in teacher.classifier.state_dict().items()})
    return Checkpoint(tensors, stage=stage, iteration=iteration, seed=seed)


def train_stage(
    cfg: TrainConfig,
    teacher: FpTeacher,
    student: BinaryStudent,
    batcher: Batcher,
    telemetry: TextIO | None = None,
    ckpt_dir: str | os.PathLike | None = None,
    iter_offset: int = 0,
) -> tuple[Checkpoint, list[LossReport]]:
    """One pretraining stage: sample -> forward_pair -> objective -> backward -> step.

    Both theta (teacher classifier) and phi (student) are updated every
    step.  One LossReport per step is returned and, if ``telemetry`` is
    given, written as a CSV row and flushed.
    """
    if student.mode is not cfg.stage:
        raise ContractError(f"student is in {student.mode.name} mode but the stage expects {cfg.stage.name}")
    if any(p.requires_grad for p in teacher.extractor.parameters()):
        raise ContractError("teacher extractor must be frozen")
    stage = cfg.stage.stage
    params = trainable_parameters(student, teacher)
    theta = teacher.classifier.parameters()
    opt_theta = make_optimizer(cfg.optimizer, theta, cfg.lr * cfg.theta_lr_scale, cfg.momentum, cfg.weight_decay, cfg.betas)
    opt = make_optimizer(cfg.optimizer, student.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay, cfg.betas)
    lrs = LrSchedule(cfg.lr, cfg.iters, cfg.lr_decay)
    schedule = cfg.schedule()
    named = [(p.name, p) for p in params]
    teacher.train()
    student.train()
    reports: list[LossReport] = []

    for t in range(cfg.iters):
        x, _ = batcher.next_batch()
        opt.lr = lrs.at(t)
        opt_theta.lr = opt.lr * cfg.theta_lr_scale
        opt.zero_grad()
        opt_theta.zero_grad()
        out = forward_pair(teacher, student, Tensor(x))
        total, report = burn_objective(out.p1, out.p2, out.v1, out.v2_fs, t, schedule, cfg.fs_variant, cfg.use_fs_loss, stage)
        report.iter = iter_offset + t
        if not math.isfinite(report.loss_total):
            bad = _first_nonfinite(
                [(n, p.data) for n, p in named]
                + [("v1", out.v1.data), ("v2", out.v2.data), ("p1", out.p1.data), ("p2", out.p2.data)]
            ) or "loss_total"
            raise NumericAbort(f"non-finite loss at stage {stage} iteration {t}; first NaN/inf tensor: {bad}", bad)
        total.backward()
        bad = _first_nonfinite((f"grad({n})", p.grad) for n, p in named)
        if bad:
            raise NumericAbort(f"non-finite gradient at stage {stage} iteration {t}: {bad}", bad)
        report.gnorms = grad_group_norms(student, teacher)
        opt.step()
        opt_theta.step()
        reports.append(report)
        if telemetry is not None:
            telemetry.write(report.csv_row() + "\n")
            telemetry.flush()
        if ckpt_dir is not None and cfg.checkpoint_every and (t + 1) % cfg.checkpoint_every == 0 and t + 1 < cfg.iters:
            stage_checkpoint(teacher, student, stage, t + 1, cfg.seed).save(Path(ckpt_dir) / f"stage{stage}_iter{t + 1}.bnck")

    final = stage_checkpoint(teacher, student, stage, cfg.iters, cfg.seed)
    if ckpt_dir is not None:
        final.save(Path(ckpt_dir) / f"stage{stage}.bnck")
    return final, reports


@dataclass
class BurnResult:
    extractor: Checkpoint
    final: Checkpoint
    reports: list[LossReport]
    stage_checkpoints: list[Checkpoint] = field(default_factory=list)
    handoff: Checkpoint | None = None  # stage-2 state at step 0, before any update
    student: BinaryStudent | None = None


def run_burn(
    cfg: BurnConfig,
    teacher_ckpt: Checkpoint,
    data: Dataset,
    out_dir: str | os.PathLike | None = None,
) -> BurnResult:
    """Stage 1 (activations binarised) then stage 2 (fully binary) from stage-1 weights.

    The stage-2 student *and* the FP classifier start from their stage-1
    final values.  Returns the student's feature extractor checkpoint.
    """
    net = teacher_config_from_checkpoint(teacher_ckpt, cfg.num_classes, cfg.seed, cfg.student_widths)
    net.binary_stem = cfg.binary_stem
    teacher = build_teacher(net, teacher_ckpt)
    batcher = Batcher(data, cfg.batch_size, cfg.augment(), seed=cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    telemetry = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        telemetry = (out / "telemetry.csv").open("w", encoding="utf-8", newline="")
        telemetry.write(LossReport.CSV_HEADER + "\n")

    reports: list[LossReport] = []
    stage_ckpts: list[Checkpoint] = []
    handoff = None
    prev: Checkpoint | None = None
    student = None
    try:
        for scfg in cfg.stage_configs():
            student = make_student(net, scfg.stage, init=prev)
            if prev is not None:
                teacher.classifier.load_state_dict(prev.subset("fp_classifier."), prefix="fp_classifier.")
                handoff = stage_checkpoint(teacher, student, scfg.stage.stage, 0, cfg.seed)
            prev, rep = train_stage(scfg, teacher, student, batcher, telemetry, out, iter_offset=len(reports))
            stage_ckpts.append(prev)
            reports.extend(rep)
    finally:
        if telemetry is not None:
            telemetry.close()

    assert student is not None and prev is not None
    ext = extractor_checkpoint(student, prev.stage, len(reports), cfg.seed)
    if out is not None:
        ext.save(out / "extractor.bnck")
    return BurnResult(ext, prev, reports, stage_ckpts, handoff, student)


# ---------------------------------------------------------------------------
# supervised teacher pretraining


@dataclass
class TeacherPretrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    widths: tuple[int, ...] = (16, 32, 64, 128)
    holdout: float = 0.1
    crop_padding: int = 4
    flip_prob: float = 0.5
    seed: int = 0


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    heldout_top1: float


class _Classifier:
    def __init__(self, ext, head):
        self.ext, self.head = ext, head

    def __call__(self, x: Tensor) -> Tensor:
        return self.head(self.ext(x))


def teacher_logits(ckpt: Checkpoint, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode logits of a pretrained teacher (extractor + ``head.*``)."""
    net = teacher_config_from_checkpoint(ckpt)
    ext = build_fp_extractor(net.teacher_widths, net.in_channels, 0)
    ext.load_state_dict(ckpt.subset("extractor."), prefix="extractor.")
    w = ckpt.tensors["head.weight"]
    head = Linear(w.shape[1], w.shape[0], np.random.default_rng(0), ParamGroup.FROZEN)
    head.load_state_dict(ckpt.subset("head."), prefix="head.")
    ext.eval()
    with no_grad():
        return np.concatenate(
            [head(ext(Tensor(images[i:i + batch_size]))).data for i in range(0, len(images), batch_size)]
        ) if len(images) else np.zeros((0, w.shape[0]), np.float32)


def pretrain_teacher(data: Dataset, cfg: TeacherPretrainConfig, log=None) -> tuple[Checkpoint, list[EpochLog]]:
    """Supervised cross-entropy training of the FP extractor plus a linear head.

    Held-out top-1 is logged per epoch on a seeded split of ``data``.
    """
    train, held = data.split(cfg.holdout, seed=cfg.seed)
    ext = build_fp_extractor(cfg.widths, data.image_shape[0], cfg.seed, ParamGroup.FP_CLASSIFIER)
    head = Linear(ext.out_dim, data.num_classes, np.random.default_rng([cfg.seed, 3]), ParamGroup.FP_CLASSIFIER)
    head.assign_names("head.")
    model = _Classifier(ext, head)
    params = ext.parameters() + head.parameters()
    batcher = Batcher(train, cfg.batch_size, AugmentSpec(cfg.crop_padding, cfg.flip_prob), seed=cfg.seed)
    steps = cfg.epochs * batcher.steps_per_epoch() if len(train) else 0
    opt = make_optimizer("sgd", params, cfg.lr, cfg.momentum, cfg.weight_decay)
    lrs = LrSchedule(cfg.lr, steps, "cosine")

    def snapshot(epoch: int) -> Checkpoint:
        tensors = {"extractor." + k: v for k, v in ext.state_dict().items()}
        tensors.update({"head." + k: v for k, v in head.state_dict().items()})
        return Checkpoint(tensors, stage=0, iteration=epoch, seed=cfg.seed)

    logs: list[EpochLog] = []
    step = 0
    for epoch in range(cfg.epochs):
        ext.train()
        losses = []
        for x, y in batcher.epoch_batches():
            opt.lr = lrs.at(step)
            opt.zero_grad()
            loss = T.cross_entropy(model(Tensor(x)), y)
            if not math.isfinite(loss.item()):
                raise NumericAbort(f"non-finite teacher loss at epoch {epoch}", "loss")
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step += 1
        ext.eval()
        with no_grad():
            logits = [model(Tensor(xb)).data for xb, _ in iterate_plain(held, 256)]
        acc = topk_accuracy(np.concatenate(logits), held.labels, 1) if len(held) else 0.0
        entry = EpochLog(epoch, float(np.mean(losses)) if losses else float("nan"), acc)
        logs.append(entry)
        if log is not None:
            log(entry)
    return snapshot(cfg.epochs), logs
