"""The three actors of BURN: frozen FP extractor + trainable FP classifier
(the moving target) and the binary student split into extractor and
classifier, plus an optional feature adapter for the similarity loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .binary import BinarizeMode
from .checkpoint import Checkpoint
from .errors import ContractError, DimensionError, LoadError
from .nn import BatchNorm2d, Conv2d, Linear, Module, RPReLU, RSign
from .tensor import ParamGroup, Tensor, no_grad

STRIDES = (2, 2, 2, 1)


@dataclass
class NetConfig:
    teacher_widths: tuple[int, ...] = (16, 32, 64, 128)
    student_widths: tuple[int, ...] = (16, 32, 64, 64)
    num_classes: int = 100
    in_channels: int = 3
    seed: int = 0
    binary_stem: bool = True


def _strides(n: int) -> tuple[int, ...]:
    return tuple(STRIDES[i] if i < len(STRIDES) else 2 for i in range(n))


class FpExtractor(Module):
    """conv3x3 -> BN -> ReLU blocks, then global average pooling."""

    def __init__(self, widths, in_channels: int, rng, group: ParamGroup = ParamGroup.FROZEN):
        self.convs, self.bns = [], []
        cin = in_channels
        for w, s in zip(widths, _strides(len(widths))):
            self.convs.append(Conv2d(cin, w, 3, s, 1, rng, group))
            self.bns.append(BatchNorm2d(w, group))
            cin = w
        self.out_dim = cin
        self.in_channels = in_channels

    def forward(self, x: Tensor) -> Tensor:
        for conv, bn in zip(self.convs, self.bns):
            x = T.relu(bn(conv(x)))
        return T.global_avg_pool(x)


class BinaryExtractor(Module):
    """Binary conv blocks followed by global average pooling.

    Each block is RSign (binarises the block input) -> conv -> BN -> RPReLU,
    with a real-valued, parameter-free shortcut around it when ``residual``.
    The stem (first block) sees the real-valued image; its weights are
    binarised like every other conv unless ``binary_stem`` is False.
    """

    def __init__(
        self,
        widths,
        in_channels: int,
        rng,
        group: ParamGroup = ParamGroup.BINARY_EXTRACTOR,
        residual: bool = True,
        binary_stem: bool = True,
    ):
        self.signs, self.convs, self.bns, self.acts = [], [], [], []
        self.residual = residual
        self.binary_stem = binary_stem
        cin = in_channels
        for i, (w, s) in enumerate(zip(widths, _strides(len(widths)))):
            if i > 0:
                self.signs.append(RSign(cin, group))
            self.convs.append(Conv2d(cin, w, 3, s, 1, rng, group, binary=i > 0 or binary_stem))
            self.bns.append(BatchNorm2d(w, group))
            self.acts.append(RPReLU(w, group))
            cin = w
        self.out_dim = cin
        self.in_channels = in_channels
        self.mode = BinarizeMode.NONE

    def set_mode(self, mode: BinarizeMode) -> None:
        self.mode = mode
        for conv in self.convs:
            conv.mode = mode

    def forward(self, x: Tensor) -> Tensor:
        for i, (conv, bn, act) in enumerate(zip(self.convs, self.bns, self.acts)):
            h = x
            if i > 0 and self.mode.binarize_activations:
                h = self.signs[i - 1](h)
            h = act(bn(conv(h)))
            x = h + self._shortcut(x, conv) if self.residual else h
        return T.global_avg_pool(x)

    @staticmethod
    def _shortcut(x: Tensor, conv: Conv2d) -> Tensor:
        # real-valued, parameter-free: average-pool to the output grid, zero-pad channels
        if conv.stride > 1:
            x = T.avg_pool2d(x, conv.stride)
        return T.pad_channels(x, conv.weight.shape[0])


class FpTeacher(Module):
    def __init__(self, extractor: FpExtractor, classifier: Linear):
        self.extractor = extractor
        self.classifier = classifier
        self.extractor.set_group(ParamGroup.FROZEN)
        self.extractor.eval()

    def features(self, x: Tensor) -> Tensor:
        self.extractor.eval()
        with no_grad():
            return self.extractor(x)

    def train(self, mode: bool = True) -> "FpTeacher":
        super().train(mode)
        self.extractor.eval()
        return self


class BinaryStudent(Module):
    def __init__(self, extractor: BinaryExtractor, classifier: Linear, adapter: Linear | None, mode: BinarizeMode):
        self.extractor = extractor
        self.classifier = classifier
        if adapter is not None:
            self.adapter = adapter
        self.set_mode(mode)

    @property
    def adapter_enabled(self) -> bool:
        return hasattr(self, "adapter")

    def set_mode(self, mode: BinarizeMode) -> None:
        self.mode = mode
        self.extractor.set_mode(mode)
        self.classifier.mode = mode
        if self.adapter_enabled:
            self.adapter.mode = mode


class PairOutput(NamedTuple):
    v1: Tensor
    v2: Tensor
    p1: Tensor
    p2: Tensor
    v2_fs: Tensor  # v2 as seen by the feature-similarity loss (adapter output when enabled)


def _rngs(seed: int):
    return np.random.default_rng([seed, 1]), np.random.default_rng([seed, 2])


def widths_from_state(state: dict[str, np.ndarray], prefix: str = "") -> tuple[int, ...]:
    widths = []
    i = 0
    while f"{prefix}convs.{i}.weight" in state:
        widths.append(int(state[f"{prefix}convs.{i}.weight"].shape[0]))
        i += 1
    return tuple(widths)


def build_fp_extractor(widths, in_channels: int, seed: int, group: ParamGroup = ParamGroup.FROZEN) -> FpExtractor:
    ext = FpExtractor(widths, in_channels, np.random.default_rng([seed, 0]), group)
    return ext.assign_names("extractor.")


def build_teacher(config: NetConfig, weights: Checkpoint) -> FpTeacher:
    """Load the frozen FP extractor from ``weights`` and attach a fresh classifier."""
    state = weights.subset("extractor.")
    ext = FpExtractor(config.teacher_widths, config.in_channels, np.random.default_rng([config.seed, 0]))
    ext.assign_names("extractor.")
    ext.load_state_dict(state, prefix="extractor.")
    cls_rng, _ = _rngs(config.seed)
    head = Linear(ext.out_dim, config.num_classes, cls_rng, ParamGroup.FP_CLASSIFIER)
    teacher = FpTeacher(ext, head)
    head.assign_names("fp_classifier.")
    return teacher


def teacher_config_from_checkpoint(ckpt: Checkpoint, num_classes: int = 100, seed: int = 0, student_widths=None) -> NetConfig:
    state = ckpt.subset("extractor.")
    widths = widths_from_state(state)
    if not widths:
        raise LoadError("teacher checkpoint has no extractor.convs.0.weight", "extractor.convs.0.weight")
    cin = int(state["convs.0.weight"].shape[1])
    kw = {} if student_widths is None else {"student_widths": tuple(student_widths)}
    return NetConfig(teacher_widths=widths, num_classes=num_classes, in_channels=cin, seed=seed, **kw)


def make_student(config: NetConfig, mode: BinarizeMode, init: Checkpoint | None = None) -> BinaryStudent:
    _, rng = _rngs(config.seed)
    ext = BinaryExtractor(config.student_widths, config.in_channels, rng, binary_stem=config.binary_stem)
    d_bin, d_fp = ext.out_dim, config.teacher_widths[-1]
    classifier = Linear(d_bin, config.num_classes, rng, ParamGroup.BINARY_CLASSIFIER, binary=True)
    adapter = Linear(d_bin, d_fp, rng, ParamGroup.BINARY_EXTRACTOR, binary=True) if d_bin != d_fp else None
    student = BinaryStudent(ext, classifier, adapter, mode)
    student.assign_names("student.")
    if init is not None:
        if init.stage > mode.stage:
            raise ContractError(f"cannot start a {mode.name} student from a stage-{init.stage} checkpoint")
        student.load_state_dict(init.subset("student."), prefix="student.")
    return student


def forward_pair(teacher: FpTeacher, student: BinaryStudent, x) -> PairOutput:
    """Run both networks on the same view ``x``; no gradient reaches the FP extractor."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    cin_t = teacher.extractor.in_channels
    cin_s = student.extractor.in_channels
    if x.ndim != 4 or x.shape[1] != cin_t or x.shape[1] != cin_s:
        raise DimensionError(f"input {x.shape} does not fit stems with {cin_t}/{cin_s} channels")
    v1 = teacher.features(x)
    p1 = T.softmax(teacher.classifier(v1))
    v2 = student.extractor(x)
    p2 = T.softmax(student.classifier(v2))
    v2_fs = student.adapter(v2) if student.adapter_enabled else v2
    return PairOutput(v1, v2, p1, p2, v2_fs)


def extractor_checkpoint(student: BinaryStudent, stage: int, iteration: int, seed: int) -> Checkpoint:
    """The student's feature extractor (plus adapter) as a standalone checkpoint."""
    tensors = {"extractor." + k: v for k, v in student.extractor.state_dict().items()}
    tensors["meta.binary_stem"] = np.array([float(student.extractor.binary_stem)], np.float32)
    if student.adapter_enabled:
        tensors.update({"adapter." + k: v for k, v in student.adapter.state_dict().items()})
    return Checkpoint(tensors, stage=stage, iteration=iteration, seed=seed)


def load_binary_extractor(ckpt: Checkpoint, mode: BinarizeMode | None = None) -> BinaryExtractor:
    """Rebuild a :class:`BinaryExtractor` from an extractor checkpoint, frozen."""
    state = ckpt.subset("extractor.")
    widths = widths_from_state(state)
    if not widths:
        raise LoadError("extractor checkpoint has no extractor.convs.0.weight", "extractor.convs.0.weight")
    cin = int(state["convs.0.weight"].shape[1])
    flag = ckpt.tensors.get("meta.binary_stem")
    ext = BinaryExtractor(widths, cin, np.random.default_rng(0), binary_stem=flag is None or bool(flag.ravel()[0]))
    ext.assign_names("extractor.")
    ext.load_state_dict(state, prefix="extractor.")
    if mode is None:
        mode = BinarizeMode.ACTIVATIONS_ONLY if ckpt.stage == 1 else BinarizeMode.FULL_BINARY
    ext.set_mode(mode)
    ext.set_group(ParamGroup.FROZEN)
    return ext.eval()
