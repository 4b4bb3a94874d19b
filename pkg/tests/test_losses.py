import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ctglip.losses import (
    EmptyOrgansError,
    LossConfig,
    TrainingDivergence,
    abnormality_text_loss,
    clip_batch_loss,
    infonce_terms,
    organ_text_loss,
    segmentation_loss,
    total_loss,
    weighted_total,
)

from oracles import (
    central_difference,
    naive_abnormality_text_loss,
    naive_clip_loss,
    naive_organ_text_loss,
    naive_segmentation_loss,
    random_unit,
    relative_error,
)


def t64(x):
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


class TestClipBatchLoss:
    def test_single_pair_is_zero(self):
        v = t64([[0.6, 0.8]])
        assert clip_batch_loss(v, v.clone(), 0.07).item() == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_pairs_closed_form(self):
        e = t64(np.eye(2))
        expected = 2 * math.log(1 + math.exp(-1))
        assert expected == pytest.approx(0.62652, abs=1e-5)
        assert clip_batch_loss(e, e.clone(), 1.0).item() == pytest.approx(expected, abs=1e-12)
        assert naive_clip_loss(np.eye(2), np.eye(2), 1.0) == pytest.approx(expected, abs=1e-12)

    def test_random_batch_matches_naive(self):
        rng = np.random.default_rng(5)
        V, T = random_unit(rng, 5, 8), random_unit(rng, 5, 8)
        got = clip_batch_loss(t64(V), t64(T), 0.07).item()
        assert got == pytest.approx(naive_clip_loss(V, T, 0.07), abs=1e-10)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            clip_batch_loss(t64(np.eye(2)), t64(np.eye(3)[:2]), 0.07)


class TestOrganTextLoss:
    def test_single_organ_zero(self):
        z = t64([[1.0, 0.0, 0.0]])
        assert organ_text_loss(z, z.clone(), 0.07).item() == pytest.approx(0.0, abs=1e-12)

    def test_joint_permutation_invariance(self):
        rng = np.random.default_rng(1)
        Z, T = random_unit(rng, 6, 8), random_unit(rng, 6, 8)
        perm = rng.permutation(6)
        a = organ_text_loss(t64(Z), t64(T), 0.07).item()
        b = organ_text_loss(t64(Z[perm]), t64(T[perm]), 0.07).item()
        assert a == pytest.approx(b, abs=1e-12)

    def test_random_matches_naive(self):
        rng = np.random.default_rng(2)
        Z, T = random_unit(rng, 4, 8), random_unit(rng, 4, 8)
        got = organ_text_loss(t64(Z), t64(T), 0.07).item()
        assert got == pytest.approx(naive_organ_text_loss(Z, T, 0.07), abs=1e-10)

    def test_empty_organs(self):
        with pytest.raises(EmptyOrgansError):
            organ_text_loss(t64(np.zeros((0, 4))), t64(np.zeros((0, 4))), 0.07)


class TestAbnormalityTextLoss:
    def test_no_negatives_reduces_to_organ_text(self):
        rng = np.random.default_rng(3)
        Z, T = random_unit(rng, 5, 8), random_unit(rng, 5, 8)
        a = abnormality_text_loss(t64(Z), t64(T), 0.07).item()
        b = organ_text_loss(t64(Z), t64(T), 0.07).item()
        assert abs(a - b) <= 1e-12

    def test_one_organ_one_negative_closed_form(self):
        z = t64([[1.0, 0.0]])
        T = t64([[1.0, 0.0], [0.0, 1.0]])
        expected = math.log(1 + math.exp(-1))
        assert expected == pytest.approx(0.31326, abs=1e-5)
        assert abnormality_text_loss(z, T, 1.0).item() == pytest.approx(expected, abs=1e-12)

    def test_random_matches_naive(self):
        rng = np.random.default_rng(4)
        Z, T = random_unit(rng, 3, 8), random_unit(rng, 11, 8)
        got = abnormality_text_loss(t64(Z), t64(T), 0.07).item()
        assert got == pytest.approx(naive_abnormality_text_loss(Z, T, 0.07), abs=1e-10)

    def test_too_few_texts(self):
        with pytest.raises(ValueError):
            abnormality_text_loss(t64(np.eye(3)), t64(np.eye(3)[:2]), 0.07)

    def test_negatives_only_enter_image_to_text_term(self):
        rng = np.random.default_rng(6)
        Z, T = random_unit(rng, 3, 8), random_unit(rng, 7, 8)
        i2t, t2i = infonce_terms(t64(Z), t64(T), 0.07)
        T2 = T.copy()
        T2[5] = random_unit(rng, 1, 8)[0]
        i2t_b, t2i_b = infonce_terms(t64(Z), t64(T2), 0.07)
        assert i2t.item() != pytest.approx(i2t_b.item(), abs=1e-9)
        assert t2i.item() == t2i_b.item()

    def test_negative_texts_get_gradient_only_from_image_side(self):
        rng = np.random.default_rng(7)
        Z = t64(random_unit(rng, 3, 8))
        T = t64(random_unit(rng, 6, 8)).requires_grad_()
        _, t2i = infonce_terms(Z, T, 0.07)
        (g,) = torch.autograd.grad(t2i, T)
        assert torch.all(g[3:] == 0)
        i2t, _ = infonce_terms(Z, T, 0.07)
        (g,) = torch.autograd.grad(i2t, T)
        assert torch.any(g[3:] != 0)


def _family(s):
    """Matched pairs at similarity s, mismatched at -1, in 3 dims (2 pairs)."""
    a = np.array([1.0, 0.0, 0.0])
    b = np.array([-1.0, 0.0, 0.0])
    off = math.sqrt(max(0.0, 1 - s * s))
    Z = np.stack([a, b])
    T = np.stack([[s, off, 0.0], [-s, 0.0, off]])
    return t64(Z), t64(T)


@pytest.mark.parametrize("loss", [clip_batch_loss, organ_text_loss, abnormality_text_loss])
def test_monotone_in_matched_similarity(loss):
    values = [loss(*_family(s), 0.07).item() for s in np.linspace(0.0, 1.0, 21)]
    assert all(b < a for a, b in zip(values, values[1:]))


@settings(max_examples=60, deadline=None)
@given(
    m=st.integers(1, 6),
    b=st.integers(0, 12),
    seed=st.integers(0, 2**32 - 1),
    tau=st.floats(0.02, 2.0),
)
def test_contrastive_losses_non_negative(m, b, seed, tau):
    rng = np.random.default_rng(seed)
    Z, T = random_unit(rng, m, 8), random_unit(rng, m + b, 8)
    assert abnormality_text_loss(t64(Z), t64(T), tau).item() >= 0
    assert organ_text_loss(t64(Z), t64(T[:m]), tau).item() >= 0


class TestSegmentationLoss:
    def test_perfect_prediction(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 3, size=(4, 4, 4))
        logits = np.where(np.eye(3)[labels].transpose(3, 0, 1, 2) > 0, 50.0, -50.0)
        assert segmentation_loss(t64(logits), torch.as_tensor(labels)).item() == pytest.approx(0.0, abs=1e-6)

    def test_uniform_logits_balanced_mask(self):
        labels = np.zeros((2, 2, 2), dtype=int)
        labels[1] = 1
        logits = np.zeros((2, 2, 2, 2))
        got = segmentation_loss(t64(logits), torch.as_tensor(labels), 1e-5).item()
        # CE = log 2; foreground dice = (2*2 + eps)/(4 + 4 + eps)
        dice = (2 * 0.5 * 4 + 1e-5) / (0.5 * 8 + 4 + 1e-5)
        assert got == pytest.approx(math.log(2) + 1 - dice, abs=1e-12)
        assert got == pytest.approx(naive_segmentation_loss(logits, labels, 1e-5), abs=1e-12)

    def test_random_matches_naive(self):
        rng = np.random.default_rng(9)
        labels = rng.integers(0, 4, size=(3, 4, 5))
        logits = rng.normal(0, 3, size=(4, 3, 4, 5))
        got = segmentation_loss(t64(logits), torch.as_tensor(labels), 1e-5).item()
        assert got == pytest.approx(naive_segmentation_loss(logits, labels, 1e-5), abs=1e-8)

    def test_batched_is_mean_of_images(self):
        rng = np.random.default_rng(10)
        labels = rng.integers(0, 3, size=(2, 3, 3, 3))
        logits = rng.normal(size=(2, 3, 3, 3, 3))
        batched = segmentation_loss(t64(logits), torch.as_tensor(labels)).item()
        singles = [segmentation_loss(t64(logits[i]), torch.as_tensor(labels[i])).item() for i in range(2)]
        assert batched == pytest.approx(np.mean(singles), abs=1e-12)

    def test_class_count_mismatch(self):
        with pytest.raises(ValueError):
            segmentation_loss(t64(np.zeros((2, 2, 2, 2))), torch.full((2, 2, 2), 3))


class TestTotalLoss:
    def test_defaults(self):
        cfg = LossConfig()
        assert (cfg.tau, cfg.lambda_ot, cfg.lambda_at, cfg.lambda_segm) == (0.07, 0.5, 0.5, 1.0)

    @pytest.mark.parametrize(
        "parts, expected", [((0, 0, 0), 0.0), ((1, 1, 1), 2.0), ((0.4, 0.6, 0.2), 0.7)]
    )
    def test_weighted_sum(self, parts, expected):
        out = total_loss(*parts)
        assert out.total == pytest.approx(expected, abs=1e-15)
        assert (out.l_ot, out.l_at, out.l_segm) == tuple(float(p) for p in parts)

    def test_nan_component_raises(self):
        with pytest.raises(TrainingDivergence):
            total_loss(float("nan"), 0.0, 0.0)
        with pytest.raises(TrainingDivergence):
            weighted_total(torch.tensor(1.0), torch.tensor(float("nan")), torch.tensor(0.0))

    def test_bad_tau(self):
        with pytest.raises(ValueError):
            LossConfig(tau=0.0)


def _grad_check(fn, inputs):
    tensors = [t64(x).requires_grad_() for x in inputs]
    out = fn(*tensors)
    grads = torch.autograd.grad(out, tensors)
    worst = 0.0
    for k, x in enumerate(inputs):
        def scalar(v, k=k):
            args = [t64(v) if j == k else t64(inputs[j]) for j in range(len(inputs))]
            return fn(*args).item()

        worst = max(worst, relative_error(grads[k].numpy(), central_difference(scalar, x, 1e-5)))
    return worst


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(11)
    Z, T = random_unit(rng, 4, 8), random_unit(rng, 9, 8)
    assert _grad_check(lambda a, b: abnormality_text_loss(a, b, 0.07), [Z, T]) <= 1e-4
    assert _grad_check(lambda a, b: organ_text_loss(a, b, 0.07), [Z, T[:4]]) <= 1e-4
    assert _grad_check(lambda a, b: clip_batch_loss(a, b, 0.07), [Z, T[:4]]) <= 1e-4
    labels = torch.as_tensor(rng.integers(0, 3, size=(2, 3, 3)))
    logits = rng.normal(size=(3, 2, 3, 3))
    assert _grad_check(lambda a: segmentation_loss(a, labels, 1e-5), [logits]) <= 1e-4
