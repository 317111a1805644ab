import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from siamav.embed import AUDIO, VISUAL, patchify
from siamav.loss import (
    DegenerateInputError,
    LossConfig,
    bce_with_logits,
    contrastive_loss,
    cosine_similarity_matrix,
    cross_entropy,
    reconstruction_loss,
    total_pretrain_loss,
)
from siamav.mask import plan_fixed_ratio
from siamav.tensor import ConfigError, ShapeError, Tensor, backward, finite_diff_check


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# -- cosine similarity --------------------------------------------------------------


def test_cosine_orthonormal_is_identity():
    q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((4, 4)))
    assert np.allclose(cosine_similarity_matrix(t64(q), t64(q)).data, np.eye(4), atol=1e-12)


def test_cosine_dot_norm_oracle(rng):
    a, v = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    want = [[a[i] @ v[j] / (np.linalg.norm(a[i]) * np.linalg.norm(v[j])) for j in range(3)] for i in range(3)]
    assert np.allclose(cosine_similarity_matrix(t64(a), t64(v)).data, want, rtol=0, atol=1e-6)


@given(seed=st.integers(0, 10**6), lam=st.floats(1e-3, 1e3))
def test_cosine_row_scale_invariance(seed, lam):
    r = np.random.default_rng(seed)
    a, v = r.standard_normal((3, 5)), r.standard_normal((3, 5))
    s = cosine_similarity_matrix(t64(a), t64(v)).data
    a[1] *= lam
    assert np.allclose(cosine_similarity_matrix(t64(a), t64(v)).data, s, atol=1e-12)
    assert np.all(np.abs(s) <= 1 + 1e-12)


def test_cosine_zero_row_is_named():
    a = np.ones((3, 2))
    a[2] = 0
    with pytest.raises(DegenerateInputError, match="row 2"):
        cosine_similarity_matrix(t64(a), t64(np.ones((3, 2))))


# -- contrastive ------------------------------------------------------------------


@pytest.mark.parametrize("b", [2, 5, 16])
@pytest.mark.parametrize("symmetric", [True, False])
def test_identical_rows_give_ln_b(b, symmetric):
    x = t64(np.ones((b, 3)))
    assert abs(contrastive_loss(x, x, symmetric=symmetric).item() - math.log(b)) <= 1e-6


def test_identity_similarity_is_near_zero():
    # (B-1) e^-20 stays under 1e-8 only for B <= 5
    e = t64(np.eye(4))
    got = contrastive_loss(e, e, tau=0.05).item()
    assert got <= 1e-8
    assert abs(got - math.log1p(3 * math.exp(-20))) <= 1e-15


def test_contrastive_is_permutation_invariant(rng):
    a, v = rng.standard_normal((7, 4)), rng.standard_normal((7, 4))
    p = rng.permutation(7)
    x = contrastive_loss(t64(a), t64(v)).item()
    y = contrastive_loss(t64(a[p]), t64(v[p])).item()
    assert abs(x - y) <= 1e-12


def test_contrastive_needs_two_pairs():
    with pytest.raises(ShapeError):
        contrastive_loss(t64(np.ones((1, 3))), t64(np.ones((1, 3))))


def test_one_directional_oracle(rng):
    a, v = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    s = np.array([[x @ y / np.linalg.norm(x) / np.linalg.norm(y) for y in v] for x in a]) / 0.05
    a2v = -np.mean([s[i, i] - np.log(np.exp(s[i]).sum()) for i in range(4)])
    v2a = -np.mean([s[i, i] - np.log(np.exp(s[:, i]).sum()) for i in range(4)])
    assert abs(contrastive_loss(t64(a), t64(v), symmetric=False).item() - a2v) <= 1e-9
    assert abs(contrastive_loss(t64(a), t64(v)).item() - (a2v + v2a) / 2) <= 1e-9


def test_nonnegative_when_diagonal_dominates(rng):
    for _ in range(20):
        a = rng.standard_normal((5, 3))
        assert contrastive_loss(t64(a), t64(a)).item() >= 0


def test_loss_falls_as_diagonal_margin_grows():
    base = np.ones((4, 4))
    values = [contrastive_loss(t64(base + m * np.eye(4)), t64(base + m * np.eye(4))).item() for m in (0.5, 1, 2, 4)]
    assert all(x > y for x, y in zip(values, values[1:]))


@pytest.mark.parametrize("symmetric", [True, False])
def test_contrastive_gradient_matches_differences(rng, symmetric):
    a, v = t64(rng.standard_normal((4, 5))), rng.standard_normal((4, 5))
    assert finite_diff_check(lambda t: contrastive_loss(t, t64(v), symmetric=symmetric), a) <= 1e-6
    assert finite_diff_check(lambda t: contrastive_loss(t64(a.data), t, symmetric=symmetric), t64(v)) <= 1e-6


def test_gradient_along_row_direction_is_zero(rng):
    a = t64(rng.standard_normal((4, 5)), grad=True)
    v = t64(rng.standard_normal((4, 5)))
    backward(contrastive_loss(a, v))
    # d/dlam L(a with row i scaled by lam) at lam=1 is <grad_i, a_i>
    for i in range(4):
        assert abs(a.grad[i] @ a.data[i]) <= 1e-10


# -- reconstruction ------------------------------------------------------------------


def recon_inputs(rng, b=2):
    return rng.random((b, 16, 16, 3)), rng.standard_normal((b, 32, 16))


def test_perfect_reconstruction_is_zero(rng):
    img, aud = recon_inputs(rng)
    for mode in ("full", "masked_only"):
        plan = plan_fixed_ratio(2, 8, 4, 0.5, rng)
        got = reconstruction_loss(t64(img), img, t64(aud), aud, plan, mode, patch=8).item()
        assert got == 0.0


def test_constant_audio_offset_is_one(rng):
    img, aud = recon_inputs(rng)
    assert reconstruction_loss(t64(img), img, t64(aud + 1), aud).item() == pytest.approx(1.0, abs=1e-12)


def test_shape_mismatch_fails(rng):
    img, aud = recon_inputs(rng)
    with pytest.raises(ShapeError):
        reconstruction_loss(t64(img[:, :8]), img, t64(aud), aud)


def test_masked_only_crop_oracle(rng):
    img, aud = recon_inputs(rng, 3)
    ri, ra = rng.random(img.shape), rng.standard_normal(aud.shape)
    plan = plan_fixed_ratio(3, 8, 4, 0.5, rng)
    got = reconstruction_loss(t64(ri), img, t64(ra), aud, plan, "masked_only", patch=8).item()
    want = 0.0
    for i in range(3):
        for mod, rec, tgt in ((AUDIO, ra[i], aud[i]), (VISUAL, ri[i], img[i])):
            m = plan[mod].masked[i]
            want += np.mean((patchify(rec, 8)[m] - patchify(tgt, 8)[m]) ** 2) / 3
    assert abs(got - want) <= 1e-7


@pytest.mark.parametrize("ratio", [0.25, 0.5, 0.75])
def test_full_decomposes_into_masked_and_unmasked(rng, ratio):
    img, aud = recon_inputs(rng, 2)
    ra = rng.standard_normal(aud.shape)
    plan = plan_fixed_ratio(2, 8, 4, ratio, rng)
    full = reconstruction_loss(t64(img), img, t64(ra), aud, plan, "full", patch=8).item()
    masked = reconstruction_loss(t64(img), img, t64(ra), aud, plan, "masked_only", patch=8).item()
    unmasked = np.mean([np.mean((patchify(ra[i], 8)[k] - patchify(aud[i], 8)[k]) ** 2)
                        for i, k in enumerate(plan[AUDIO].kept)])
    nm = len(plan[AUDIO].masked[0])
    assert abs(full - (nm * masked + (8 - nm) * unmasked) / 8) <= 1e-12


def test_masked_only_needs_plan(rng):
    img, aud = recon_inputs(rng)
    with pytest.raises(ConfigError):
        reconstruction_loss(t64(img), img, t64(aud), aud, None, "masked_only")


# -- combination and classification ---------------------------------------------------


def test_total_pretrain_loss_examples():
    assert total_pretrain_loss(t64(0.5), t64(9.0), 1, 0).item() == 0.5
    assert total_pretrain_loss(t64(0.5), t64(0.3), 0, 1).item() == 0.3
    assert total_pretrain_loss(t64(0.1), t64(0.2), 2, 3).item() == pytest.approx(0.8, abs=1e-15)


def test_loss_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(tau=0)
    with pytest.raises(ConfigError):
        LossConfig(scale_contrastive=-1)
    with pytest.raises(ConfigError):
        LossConfig(scale_contrastive=0, scale_reconstruction=0).check_pretraining()


@pytest.mark.parametrize("k", [2, 8, 527])
def test_equal_logits_cross_entropy_is_ln_k(k):
    assert abs(cross_entropy(t64(np.full((3, k), 0.7)), np.array([0, 1, 1])).item() - math.log(k)) <= 1e-12


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ConfigError):
        cross_entropy(t64(np.zeros((2, 3))), np.array([0, 3]))


def test_bce_oracle_and_gradient(rng):
    x = rng.standard_normal((3, 4)) * 5
    y = (rng.random((3, 4)) < 0.5).astype(float)
    want = np.mean(y * np.logaddexp(0, -x) + (1 - y) * np.logaddexp(0, x))
    assert abs(bce_with_logits(t64(x), y).item() - want) <= 1e-12
    assert finite_diff_check(lambda t: bce_with_logits(t, y), t64(x)) <= 1e-6
    assert np.isfinite(bce_with_logits(t64(np.array([[800.0, -800.0]])), np.array([[0.0, 1.0]])).item())
