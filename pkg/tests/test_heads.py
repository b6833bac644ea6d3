import numpy as np
import pytest

from taskmix import heads, nd
from taskmix.errors import ConfigurationError, DimensionError
from taskmix.heads import HeadConfig, build_head, live_param_count, param_count

import oracles


def fc_cfg(d=16, c=5):
    return HeadConfig(kind="fc", d_backbone=d, num_classes=c)


def attn_cfg(d=16, t=8, c=5, h=2):
    return HeadConfig(kind="attention", d_backbone=d, num_classes=c, d_t=t, attn_heads=h)


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------


def test_param_count_reference_sizes():
    # the motivating comparison: wide backbone, narrow attention head
    assert param_count(fc_cfg(768, 10)) == 598_282
    assert param_count(attn_cfg(768, 64, 10, 4)) == 66_506
    ratio = 598_282 / 66_506
    assert 8.9 < ratio < 9.1
    # at d_t == d_backbone the attention head is no longer smaller
    assert param_count(attn_cfg(768, 768, 10, 4)) > param_count(fc_cfg(768, 10))


def test_param_count_ratio_holds_across_class_counts():
    for c in range(5, 101):
        r = param_count(fc_cfg(768, c)) / param_count(attn_cfg(768, 64, c, 4))
        assert r >= 8.0, (c, r)


def test_live_counts_match_formula_exactly():
    rng = np.random.default_rng(0)
    for cfg in (fc_cfg(16, 5), fc_cfg(24, 11), attn_cfg(16, 8, 5),
                attn_cfg(32, 12, 9, 4), attn_cfg(16, 32, 3)):
        head = build_head(cfg, rng, "heads/task000")
        assert live_param_count(head) == param_count(cfg), cfg


def test_config_validation():
    with pytest.raises(ConfigurationError):
        HeadConfig(kind="fc", d_backbone=16, num_classes=1)
    with pytest.raises(ConfigurationError):
        attn_cfg(t=9, h=2)  # not divisible
    with pytest.raises(ConfigurationError):
        attn_cfg(d=16, t=40)  # beyond the 2x width cap
    with pytest.raises(ConfigurationError):
        HeadConfig(kind="attention", d_backbone=16, num_classes=4, d_t=8, attn_heads=3)
    attn_cfg(d=16, t=32)  # exactly 2x is allowed (widest quartile rung)


# ---------------------------------------------------------------------------
# forward semantics
# ---------------------------------------------------------------------------


def test_zero_weights_give_zero_logits():
    rng = np.random.default_rng(1)
    for cfg in (fc_cfg(), attn_cfg()):
        head = build_head(cfg, rng, "h")
        for p in head.params:
            p.tensor.data[...] = 0.0
        out = head.forward(nd.Tensor(rng.standard_normal((6, 16))))
        np.testing.assert_array_equal(out.data, np.zeros(5))


def test_single_token_pooling_is_identity():
    rng = np.random.default_rng(2)
    head = build_head(fc_cfg(), rng, "h")
    x = rng.standard_normal((1, 16))
    got = head.forward(nd.Tensor(x)).data
    w1, b1, w2, b2 = (p.data for p in head.params)
    want = np.maximum(x[0] @ w1 + b1, 0.0) @ w2 + b2
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_attention_head_permutation_invariant():
    # no positional signal inside the head: token order cannot matter
    rng = np.random.default_rng(3)
    head = build_head(attn_cfg(), rng, "h")
    x = rng.standard_normal((7, 16))
    base = head.forward(nd.Tensor(x)).data
    perm = rng.permutation(7)
    shuffled = head.forward(nd.Tensor(x[perm])).data
    np.testing.assert_allclose(base, shuffled, atol=1e-10)


def test_masked_positions_do_not_affect_pooling():
    rng = np.random.default_rng(4)
    for cfg in (fc_cfg(), attn_cfg()):
        head = build_head(cfg, rng, "h")
        x = rng.standard_normal((2, 5, 16))
        mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=float)
        base = head.forward(nd.Tensor(x), mask=mask).data
        x2 = x.copy()
        x2[0, 3:] = 99.0
        again = head.forward(nd.Tensor(x2), mask=mask).data
        np.testing.assert_array_equal(base, again)


def test_batched_equals_per_example():
    rng = np.random.default_rng(5)
    for cfg in (fc_cfg(), attn_cfg()):
        head = build_head(cfg, rng, "h")
        x = rng.standard_normal((3, 4, 16))
        batched = head.forward(nd.Tensor(x)).data
        for i in range(3):
            single = head.forward(nd.Tensor(x[i])).data
            np.testing.assert_allclose(batched[i], single, atol=1e-12)


def test_fully_masked_sequence_rejected():
    rng = np.random.default_rng(6)
    head = build_head(fc_cfg(), rng, "h")
    x = nd.Tensor(rng.standard_normal((1, 4, 16)))
    with pytest.raises(DimensionError):
        head.forward(x, mask=np.zeros((1, 4)))


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def test_head_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    labels = np.array([1, 3, 0])
    for cfg in (fc_cfg(), attn_cfg()):
        head = build_head(cfg, rng, "h")
        x = nd.Tensor(rng.standard_normal((3, 4, 16)), requires_grad=True)
        mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0], [1, 1, 1, 0]], dtype=float)

        def loss():
            return nd.softmax_xent(head.forward(x, mask=mask), labels)

        tensors = [x] + [p.tensor for p in head.params]
        err = oracles.max_relative_grad_error(loss, tensors, rng, samples_per_tensor=6)
        assert err < 1e-6, (cfg.kind, err)
