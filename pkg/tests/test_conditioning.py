import numpy as np
import pytest
import torch

from jepalab import conditioning as C
from jepalab.data import sincos_pos_embed
from jepalab.masking import MaskConfig, MaskSpec, sample_masks


def spec_8x8(k=4, block=(2, 2)):
    """k disjoint blocks along the top rows of an 8x8 grid; everything else is context."""
    h, w = block
    targets = []
    for j in range(k):
        top, left = divmod(j * w, 8)
        top *= h
        targets.append(np.array(sorted(r * 8 + c for r in range(top, top + h) for c in range(left, left + w))))
    used = np.concatenate(targets)
    context = np.setdiff1d(np.arange(64), used)
    return MaskSpec(context=context, targets=targets, grid=(8, 8))


@pytest.fixture
def p64():
    return sincos_pos_embed(8, 8, 32)


def test_pool_kernel_rule():
    assert [C.pool_kernel(m) for m in (1, 2, 3, 4, 5, 9)] == [1, 1, 1, 2, 2, 4]
    assert C.pool_kernel(9, available=3) == 3


def test_target_block_m4_gives_two_tokens_each(p64):
    spec = spec_8x8()
    assert spec.m == 4 and len(spec.context) == 48
    cond = C.context_condition(spec, p64)
    assert cond.count == 2 * spec.k == 8
    # first token of block 0 is the mean of its first two position rows
    rows = p64[spec.targets[0]]
    assert torch.allclose(cond.tokens[0], rows[:2].mean(0))
    assert torch.allclose(cond.tokens[1], rows[2:].mean(0))


def test_context_of_48_gives_24_teacher_tokens(p64):
    assert C.target_condition(spec_8x8(), p64).count == 48 // 2


def test_five_rows_kernel_two_drops_last(p64):
    out = C.pool_positions_1d(p64[:5], m=4)
    assert out.count == 2
    assert torch.allclose(out.tokens[1], p64[2:4].mean(0))


def test_inference_pooling_counts(p64):
    assert C.pool_positions_2d(p64, (8, 8), 4).count == 64 // 16
    assert C.pool_positions_2d(sincos_pos_embed(12, 8, 32), (12, 8), 4).count == 6
    p256 = sincos_pos_embed(16, 16, 32)
    assert len(C.build_inference_input(torch.zeros(256, 32), p256, (16, 16))) == 256 + 16


def test_identical_rows_pool_to_that_row():
    p = torch.ones(16, 8) * torch.arange(8.0)
    out = C.pool_positions_2d(p, (4, 4), 4)
    assert out.count == 1 and torch.equal(out.tokens[0], torch.arange(8.0))


def test_student_sequence_lengths(p64):
    spec = spec_8x8()
    x_c = torch.zeros(48, 32)
    assert len(C.build_context_input(x_c, spec, p64)) == 48 + 8
    one = MaskSpec(context=spec.context, targets=spec.targets[:1], grid=(8, 8))
    assert len(C.build_context_input(x_c, one, p64)) == 48 + 2
    base = C.build_context_input(x_c, spec, p64, enabled=False)
    assert len(base) == 48 and base.condition.count == 0


def test_teacher_sequence_lengths(p64):
    x = torch.zeros(64, 32)
    assert len(C.build_target_input(x, spec_8x8(), p64)) == 64 + 24
    assert len(C.build_target_input(x, spec_8x8(), p64, enabled=False)) == 64
    # m = 2 -> kernel 1 -> every context position becomes a token
    assert len(C.build_target_input(x, spec_8x8(block=(1, 2)), p64)) == 64 + 56


def test_inference_lengths(p64):
    x = torch.zeros(64, 32)
    assert len(C.build_inference_input(x, p64, (8, 8))) == 68
    assert len(C.build_inference_input(x, p64, (8, 8), enabled=False)) == 64


def test_condition_tokens_carry_no_content(p64):
    spec = spec_8x8()
    a = C.build_context_input(torch.zeros(48, 32), spec, p64)
    b = C.build_context_input(torch.randn(48, 32), spec, p64)
    assert torch.equal(a.condition.tokens, b.condition.tokens)


def test_condition_counts_match_built_inputs(rng, p64):
    for _ in range(50):
        spec = sample_masks(rng, (8, 8), MaskConfig())
        s, t = C.condition_counts(spec)
        assert s == C.context_condition(spec, p64).count
        assert t == C.target_condition(spec, p64).count


def test_batch_padding_marks_real_rows(p64):
    a = C.EncoderInput(torch.ones(3, 32), C.ConditionTokens(torch.ones(1, 32), C.TARGET_WINDOWS))
    b = C.EncoderInput(torch.ones(5, 32), C.ConditionTokens.empty(32, C.TARGET_WINDOWS))
    batch = C.EncoderBatch.from_inputs([a, b])
    assert batch.content.shape == (2, 5, 32)
    assert batch.content_valid.sum(1).tolist() == [3, 5]
    assert batch.condition_valid.sum(1).tolist() == [1, 0]


def _vitl_config(backward_factor=0.0, n=2000):
    rng = np.random.default_rng(0)
    specs = [sample_masks(rng, (14, 14), MaskConfig()) for _ in range(n)]
    return C.flops_config_from_masks(specs, 1024, 24, 384, 12, 4.0, 16, backward_factor)


def test_flops_overhead_vit_large():
    cfg = _vitl_config()
    ratio = C.flops_overhead(cfg)
    assert ratio == pytest.approx(1.03, abs=0.02)
    assert abs(ratio - C.flops_overhead(cfg, "enumerated")) < 1e-9


def test_flops_no_condition_tokens_is_one():
    cfg = C.FlopsConfig(64, 4, 32, 2, 4.0, 64, 40.0, 10.0, 4, heads=4)
    assert C.flops_overhead(cfg) == 1.0


def test_flops_desk_counters_agree():
    cfg = C.FlopsConfig(64, 4, 32, 2, 4.0, 64, 48.0, 4.0, 4, heads=4, student_condition=8.0, teacher_condition=12.0)
    closed, enumerated = C.flops_overhead(cfg), C.flops_overhead(cfg, "enumerated")
    assert closed > 1.0
    assert abs(closed - enumerated) < 1e-9
    for cond in (False, True):
        a, b = C.training_flops(cfg, cond), C.training_flops(cfg, cond, "enumerated")
        assert abs(a - b) <= 1e-9 * a
