import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fusedseg import losses
from fusedseg.exceptions import ConfigurationError, NumericError
from fusedseg.model import ModelConfig, PromptSet, SamModel

from .oracles import fd_relative_error, np_dice_loss, np_focal_loss, np_mse


def _t(a):
    return torch.from_numpy(np.asarray(a, dtype=np.float64))


def _case(seed, shape=(2, 1, 6, 6)):
    rng = np.random.default_rng(seed)
    z = rng.normal(0, 2, shape)
    g = (rng.random(shape) < 0.4).astype(np.float64)
    return z, g


def test_default_weights_match_published_values():
    w = losses.LossWeights()
    assert (w.alpha, w.beta, w.lambda1, w.lambda2) == (20.0, 1.0, 100.0, 2.0)
    assert (w.focal_gamma, w.focal_alpha) == (2.0, 0.25)


def test_negative_weight_rejected():
    with pytest.raises(ConfigurationError):
        losses.LossWeights(lambda1=-1.0)


@pytest.mark.parametrize("seed", range(5))
def test_dice_and_focal_match_numpy(seed):
    z, g = _case(seed)
    p = 1 / (1 + np.exp(-z))
    assert float(losses.dice_loss(_t(p), _t(g))) == pytest.approx(np_dice_loss(p, g), abs=1e-12)
    assert float(losses.focal_loss(_t(z), _t(g))) == pytest.approx(np_focal_loss(z, g), abs=1e-12)


def test_dice_loss_examples():
    g = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
    g[..., :2, :] = 1
    assert float(losses.dice_loss(g, g)) == pytest.approx(0.0)
    # empty target, empty prediction: smoothing gives zero loss
    z = torch.zeros_like(g)
    assert float(losses.dice_loss(z, z)) == 0.0
    assert float(losses.dice_loss(1 - g, g)) == pytest.approx(1 - 1 / 17)


def test_focal_loss_hand_value():
    z = torch.tensor([[0.0]], dtype=torch.float64)
    g = torch.tensor([[1.0]], dtype=torch.float64)
    # p = 0.5: -0.25 * 0.5**2 * log(0.5)
    assert float(losses.focal_loss(z, g)) == pytest.approx(0.25 * 0.25 * np.log(2))
    g0 = torch.tensor([[0.0]], dtype=torch.float64)
    assert float(losses.focal_loss(z, g0)) == pytest.approx(0.75 * 0.25 * np.log(2))


def test_focal_gamma_zero_is_weighted_bce():
    z, g = _case(7)
    bce = torch.nn.functional.binary_cross_entropy_with_logits(_t(z), _t(g), weight=_t(np.where(g == 1, 0.5, 0.5)))
    assert float(losses.focal_loss(_t(z), _t(g), gamma=0.0, alpha=0.5)) == pytest.approx(float(bce), rel=1e-10)


def test_focal_log_floor():
    z = torch.tensor([[-100.0]], dtype=torch.float64)
    g = torch.tensor([[1.0]], dtype=torch.float64)
    assert float(losses.focal_loss(z, g)) == pytest.approx(0.25 * (1 - 1e-8) ** 2 * -np.log(1e-8))


def test_consistency_losses_are_global_mse_and_detach_anchor():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(2, 4, 3, 3)), rng.normal(size=(2, 4, 3, 3))
    ta, tb = _t(a).requires_grad_(True), _t(b).requires_grad_(True)
    val = losses.mfc_loss(ta, tb)
    assert float(val.detach()) == pytest.approx(np_mse(a, b), abs=1e-12)
    val.backward()
    assert tb.grad is None and ta.grad is not None
    t1, t2 = rng.normal(size=(2, 8)), rng.normal(size=(2, 8))
    assert float(losses.tc_loss(_t(t1), _t(t2))) == pytest.approx(np_mse(t1, t2), abs=1e-12)


def test_shape_mismatch_raises():
    with pytest.raises(ConfigurationError):
        losses.mfc_loss(torch.zeros(1, 2), torch.zeros(2, 1))


def test_total_is_weighted_sum_and_reports_nan_component():
    w = losses.LossWeights()
    d, f, m, t = (torch.tensor(v, dtype=torch.float64) for v in (0.3, 0.2, 0.01, 0.05))
    rep = losses.total_loss(d, f, m, t, w)
    assert float(rep.total) == pytest.approx(20 * 0.3 + 0.2 + 100 * 0.01 + 2 * 0.05)
    assert float(rep.seg) == pytest.approx(20 * 0.3 + 0.2)
    with pytest.raises(NumericError, match="mfc"):
        losses.total_loss(d, f, torch.tensor(float("nan")), t, w)


@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_finite_differences(seed):
    z, g = _case(seed)
    gt = _t(g)
    assert fd_relative_error(lambda x: losses.dice_loss(torch.sigmoid(x), gt), _t(z)) <= 1e-4
    assert fd_relative_error(lambda x: losses.focal_loss(x, gt), _t(z)) <= 1e-4
    anchor = _t(np.random.default_rng(seed + 100).normal(size=z.shape))
    assert fd_relative_error(lambda x: losses.mfc_loss(x, anchor), _t(z)) <= 1e-4
    assert fd_relative_error(lambda x: losses.tc_loss(x, anchor[:, 0, 0]), _t(z[:, 0, 0])) <= 1e-4
    assert fd_relative_error(
        lambda x: losses.total_loss(losses.dice_loss(torch.sigmoid(x), gt), losses.focal_loss(x, gt),
                                    losses.mfc_loss(x, anchor), losses.tc_loss(x[:, 0, 0], anchor[:, 0, 0])).total,
        _t(z)) <= 1e-4


def test_identity_pair_gives_exact_zero_consistency():
    model = SamModel(ModelConfig(), seed=0)
    model.train()
    rng = np.random.default_rng(0)
    x = torch.from_numpy(rng.random((3, 3, 64, 64)).astype(np.float32))
    prompts = PromptSet.from_points(rng.integers(0, 64, (3, 3, 2)))
    pair = model.forward_pair(x, x.clone(), prompts)
    rep = losses.pair_loss(pair, torch.zeros(3, 1, 64, 64))
    assert float(rep.mfc.detach()) == 0.0 and float(rep.tc.detach()) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 5.0))
def test_losses_nonnegative_and_scale_with_weights(seed, scale):
    z, g = _case(seed)
    rep = losses.total_loss(losses.dice_loss(torch.sigmoid(_t(z)), _t(g)), losses.focal_loss(_t(z), _t(g)),
                            _t(0.1), _t(0.2), losses.LossWeights(scale, scale, scale, scale))
    vals = rep.as_floats()
    assert all(v >= 0 for v in vals.values())
    assert vals["total"] == pytest.approx(scale * (vals["dice"] + vals["focal"] + 0.1 + 0.2), rel=1e-9)
