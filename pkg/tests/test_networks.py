import numpy as np
import pytest

from burnkit import tensor as T
from burnkit.binary import BinarizeMode
from burnkit.checkpoint import Checkpoint, tensors_digest
from burnkit.errors import ContractError, DimensionError, LoadError
from burnkit.losses import feature_similarity, kl_div
from burnkit.networks import (
    NetConfig,
    build_fp_extractor,
    build_teacher,
    extractor_checkpoint,
    forward_pair,
    load_binary_extractor,
    make_student,
)
from burnkit.nn import Conv2d, Linear
from burnkit.tensor import Tensor

CFG = NetConfig(teacher_widths=(4, 8), student_widths=(4, 6), num_classes=5, seed=3)


def _teacher_ckpt(cfg=CFG):
    ext = build_fp_extractor(cfg.teacher_widths, cfg.in_channels, seed=11)
    # non-trivial running statistics so eval-mode batchnorm is not the identity
    for name, buf in ext.named_buffers():
        buf[...] = np.linspace(0.5, 1.5, buf.size)
    return Checkpoint({"extractor." + k: v for k, v in ext.state_dict().items()})


def _x(n=3, seed=0):
    return Tensor(np.random.default_rng(seed).standard_normal((n, 3, 8, 8)))


def test_teacher_features_are_deterministic():
    t = build_teacher(CFG, _teacher_ckpt())
    t.train()
    a, b = t.features(_x()).data, t.features(_x()).data
    np.testing.assert_array_equal(a, b)


def test_teacher_classifier_init_reproducible():
    a = build_teacher(CFG, _teacher_ckpt()).classifier.state_dict()
    b = build_teacher(CFG, _teacher_ckpt()).classifier.state_dict()
    assert tensors_digest(a) == tensors_digest(b)
    c = build_teacher(NetConfig(**{**CFG.__dict__, "seed": 4}), _teacher_ckpt()).classifier.state_dict()
    assert tensors_digest(a) != tensors_digest(c)


def test_teacher_load_error_names_missing_tensor():
    ck = _teacher_ckpt()
    ck.tensors["extractor.convs.1.renamed"] = ck.tensors.pop("extractor.convs.1.weight")
    with pytest.raises(LoadError, match="extractor.convs.1.weight") as e:
        build_teacher(CFG, ck)
    assert e.value.tensor_name == "extractor.convs.1.weight"


def test_teacher_load_error_on_wrong_shape():
    ck = _teacher_ckpt()
    ck.tensors["extractor.bns.0.gamma"] = np.ones(7, np.float32)
    with pytest.raises(LoadError, match="extractor.bns.0.gamma"):
        build_teacher(CFG, ck)


def test_forward_pair_probabilities_and_frozen_extractor():
    teacher = build_teacher(CFG, _teacher_ckpt())
    student = make_student(CFG, BinarizeMode.ACTIVATIONS_ONLY)
    out = forward_pair(teacher, student, _x())
    np.testing.assert_allclose(out.p1.data.sum(axis=1), 1, atol=1e-6)
    np.testing.assert_allclose(out.p2.data.sum(axis=1), 1, atol=1e-6)
    assert out.v1.shape == (3, 8) and out.v2.shape == (3, 6) and out.v2_fs.shape == (3, 8)
    (kl_div(out.p2, out.p1) + feature_similarity(out.v1, out.v2_fs)).backward()
    assert all(p.grad is None for p in teacher.extractor.parameters())
    assert all(p.grad is not None for p in teacher.classifier.parameters())
    assert all(p.grad is not None for p in student.parameters())


def test_forward_pair_rejects_wrong_channels():
    teacher = build_teacher(CFG, _teacher_ckpt())
    student = make_student(CFG, BinarizeMode.ACTIVATIONS_ONLY)
    with pytest.raises(DimensionError):
        forward_pair(teacher, student, Tensor(np.zeros((1, 1, 8, 8))))


def test_theta_gradient_matches_finite_differences():
    teacher = build_teacher(CFG, _teacher_ckpt())
    student = make_student(CFG, BinarizeMode.ACTIVATIONS_ONLY)
    for p in teacher.classifier.parameters():
        p.data = p.data.astype(np.float64)
    x = _x()

    def loss():
        out = forward_pair(teacher, student, x)
        return kl_div(out.p2, out.p1)

    loss().backward()
    eps = 1e-3
    for p in teacher.classifier.parameters():
        num = np.zeros_like(p.data)
        for i in np.ndindex(p.data.shape):
            old = p.data[i]
            p.data[i] = old + eps
            hi = loss().item()
            p.data[i] = old - eps
            lo = loss().item()
            p.data[i] = old
            num[i] = (hi - lo) / (2 * eps)
        scale = max(np.abs(num).max(), 1e-6)
        assert np.abs(p.grad - num).max() / scale < 1e-4


def test_fresh_student_reproducible():
    a = make_student(CFG, BinarizeMode.ACTIVATIONS_ONLY).state_dict()
    b = make_student(CFG, BinarizeMode.ACTIVATIONS_ONLY).state_dict()
    assert tensors_digest(a) == tensors_digest(b)


def _stage1_ckpt():
    s1 = make_student(CFG, BinarizeMode.ACTIVATIONS_ONLY)
    rng = np.random.default_rng(5)
    for p in s1.parameters():
        p.data += rng.standard_normal(p.shape).astype(np.float32) * 0.1
    return s1, Checkpoint({"student." + k: v for k, v in s1.state_dict().items()}, stage=1)


def test_stage2_init_bitwise_equal():
    s1, ck = _stage1_ckpt()
    s2 = make_student(CFG, BinarizeMode.FULL_BINARY, init=ck)
    for (k1, v1), (k2, v2) in zip(s1.state_dict().items(), s2.state_dict().items()):
        assert k1 == k2 and v1.tobytes() == v2.tobytes()


def test_stage2_forward_differs_from_stage1():
    s1, ck = _stage1_ckpt()
    s2 = make_student(CFG, BinarizeMode.FULL_BINARY, init=ck)
    x = _x()
    assert not np.allclose(s1.extractor(x).data, s2.extractor(x).data)


def test_stage_mismatch_is_contract_error():
    ck = Checkpoint({}, stage=2)
    with pytest.raises(ContractError):
        make_student(CFG, BinarizeMode.ACTIVATIONS_ONLY, init=ck)


def test_student_load_error_names_tensor():
    _, ck = _stage1_ckpt()
    del ck.tensors["student.classifier.bias"]
    with pytest.raises(LoadError, match="student.classifier.bias"):
        make_student(CFG, BinarizeMode.FULL_BINARY, init=ck)


def _is_scaled_sign(layer):
    w = layer.effective_weight().data.reshape(layer.weight.shape[0], -1)
    return all(np.unique(np.abs(row)).size == 1 for row in w)


def test_full_binary_weights_are_scaled_signs():
    student = make_student(CFG, BinarizeMode.FULL_BINARY)
    layers = [m for m in student.modules() if isinstance(m, (Conv2d, Linear))]
    assert len(layers) == 4  # two convs, classifier, adapter
    assert all(_is_scaled_sign(m) for m in layers)


def test_real_stem_option_keeps_only_first_conv_real():
    student = make_student(NetConfig(**{**CFG.__dict__, "binary_stem": False}), BinarizeMode.FULL_BINARY)
    layers = [m for m in student.modules() if isinstance(m, (Conv2d, Linear))]
    stem = student.extractor.convs[0]
    assert stem.effective_weight() is stem.weight
    assert all(_is_scaled_sign(m) for m in layers if m is not stem)
    ext = load_binary_extractor(extractor_checkpoint(student, 2, 0, 0))
    assert not ext.binary_stem
    np.testing.assert_array_equal(ext(_x()).data, student.extractor.eval()(_x()).data)


def test_activations_only_uses_latent_weights():
    student = make_student(CFG, BinarizeMode.ACTIVATIONS_ONLY)
    for m in student.modules():
        if isinstance(m, (Conv2d, Linear)):
            assert m.effective_weight() is m.weight


def test_no_adapter_when_dims_match():
    cfg = NetConfig(teacher_widths=(4, 6), student_widths=(4, 6), num_classes=5)
    student = make_student(cfg, BinarizeMode.ACTIVATIONS_ONLY)
    assert not student.adapter_enabled
    out = forward_pair(build_teacher(cfg, _teacher_ckpt(cfg)), student, _x())
    assert out.v2_fs is out.v2


def test_extractor_checkpoint_round_trip():
    _, ck = _stage1_ckpt()
    s2 = make_student(CFG, BinarizeMode.FULL_BINARY, init=ck)
    s2.eval()
    ext_ck = extractor_checkpoint(s2, 2, 10, 3)
    assert "adapter.weight" in ext_ck.tensors
    ext = load_binary_extractor(Checkpoint.from_bytes(ext_ck.to_bytes()))
    assert ext.mode is BinarizeMode.FULL_BINARY and not ext.training
    np.testing.assert_array_equal(ext(_x()).data, s2.extractor(_x()).data)
    assert all(not p.requires_grad for p in ext.parameters())
