import math
import warnings

import numpy as np
import pytest
import torch

from src.errors import DimensionMismatch, InvalidConfig, NotStochastic, TooFewPatches
from src.loss_oracles import (
    cosine_recon_oracle,
    iccl_oracle,
    mse_recon_oracle,
    weighted_bce_oracle,
    weighted_ce_oracle,
)
from src.losses import (
    IcclConfig,
    LossParts,
    cosine_recon_loss,
    iccl_loss,
    mse_recon_loss,
    recon_terms,
    target_selection,
    terms_from_values,
    total_pretrain_loss,
    weighted_bce_loss,
    weighted_ce_loss,
)

SHAPES = [(2, 2, 4), (10, 5, 4), (2, 5, 300), (10, 2, 300)]


def _t(array):
    return torch.from_numpy(np.asarray(array, dtype=np.float64))


def _random_case(rng, shape):
    recon = rng.standard_normal(shape)
    target = rng.standard_normal(shape)
    visible = rng.random(shape[:2]) < 0.5
    return recon, target, visible


def test_cosine_examples():
    rng = np.random.default_rng(0)
    target = _t(rng.standard_normal((4, 3, 5)))
    assert float(cosine_recon_loss(target, target)[0]) == pytest.approx(0.0, abs=1e-12)
    assert float(cosine_recon_loss(-target, target)[0]) == pytest.approx(2.0, abs=1e-12)
    assert float(cosine_recon_loss(2.0 * target, target)[0]) == pytest.approx(0.0, abs=1e-12)


def test_cosine_zero_norm_counts_as_zero_similarity():
    target = torch.ones((2, 1, 3), dtype=torch.float64)
    recon = torch.zeros_like(target)
    assert float(cosine_recon_loss(recon, target)[0]) == pytest.approx(1.0)


def test_cosine_scale_invariance_and_mse_sensitivity():
    rng = np.random.default_rng(1)
    recon, target, visible = _random_case(rng, (4, 3, 5))
    scales = rng.uniform(0.5, 3.0, size=(4, 1, 1))
    vis = torch.from_numpy(visible)
    cos_a = float(cosine_recon_loss(_t(recon), _t(target), vis)[0])
    cos_b = float(cosine_recon_loss(_t(recon * scales), _t(target), vis)[0])
    assert cos_a == pytest.approx(cos_b, abs=1e-12)
    mse_a = float(mse_recon_loss(_t(recon), _t(target), vis)[0])
    mse_b = float(mse_recon_loss(_t(recon * scales), _t(target), vis)[0])
    assert mse_a != pytest.approx(mse_b, abs=1e-6)


def test_mse_examples():
    rng = np.random.default_rng(2)
    target = _t(rng.standard_normal((4, 3, 5)))
    assert float(mse_recon_loss(target, target)[0]) == 0.0
    assert float(mse_recon_loss(target + 3.0, target)[0]) == pytest.approx(9.0, abs=1e-12)


def test_reconstruction_losses_match_oracles():
    rng = np.random.default_rng(3)
    for trial in range(1000):
        shape = SHAPES[trial % len(SHAPES)] if trial < 40 else SHAPES[trial % 2]
        recon, target, visible = _random_case(rng, shape)
        vis = torch.from_numpy(visible)
        cos = float(cosine_recon_loss(_t(recon), _t(target), vis)[0])
        mse = float(mse_recon_loss(_t(recon), _t(target), vis)[0])
        assert cos == pytest.approx(cosine_recon_oracle(recon, target, visible), abs=1e-12)
        assert mse == pytest.approx(mse_recon_oracle(recon, target, visible), abs=1e-12)


def test_channel_without_visible_cells_is_excluded():
    recon = _t(np.zeros((2, 2, 3)))
    target = _t(np.ones((2, 2, 3)))
    visible = torch.tensor([[True, False], [True, False]])
    loss, per_channel = mse_recon_loss(recon, target, visible)
    assert float(loss) == pytest.approx(1.0)
    assert per_channel.tolist() == [1.0, 0.0]


def test_reconstruction_shape_mismatch():
    with pytest.raises(DimensionMismatch):
        cosine_recon_loss(torch.zeros(2, 2, 3), torch.zeros(2, 2, 4))
    with pytest.raises(DimensionMismatch):
        mse_recon_loss(torch.zeros(2, 2, 3), torch.zeros(2, 2, 3), torch.ones(3, 2, dtype=torch.bool))


def test_iccl_identical_subsegments():
    a = torch.ones((4, 2, 3), dtype=torch.float64)
    assert float(iccl_loss(a, a.clone(), IcclConfig(margin_alpha=1.0))) == pytest.approx(1.0)


def test_iccl_hand_example():
    anchors = _t([[[0.0, 0.0]], [[3.0, 0.0]], [[0.0, 4.0]]])
    assert float(iccl_loss(anchors, anchors.clone(), IcclConfig(margin_alpha=1.0))) == 0.0
    assert iccl_oracle(anchors.numpy(), anchors.numpy(), 1.0) == 0.0


def test_iccl_matches_oracle():
    rng = np.random.default_rng(4)
    for trial in range(1000):
        shape = SHAPES[trial % 2] if trial >= 40 else SHAPES[trial % len(SHAPES)]
        a = rng.standard_normal(shape)
        b = a + rng.normal(scale=rng.uniform(0.1, 3.0), size=shape)
        alpha = float(rng.uniform(0.0, 5.0))
        value = float(iccl_loss(_t(a), _t(b), IcclConfig(margin_alpha=alpha)))
        assert value == pytest.approx(iccl_oracle(a, b, alpha), abs=1e-12)


def test_iccl_monotone_in_alpha_and_positive_distance():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((5, 2, 4))
    b = a + 0.1 * rng.standard_normal((5, 2, 4))
    values = [float(iccl_loss(_t(a), _t(b), IcclConfig(margin_alpha=alpha))) for alpha in (0.0, 1.0, 5.0, 20.0)]
    assert values == sorted(values)
    assert min(values) >= 0.0
    far = a + 3.0 * (b - a)
    assert float(iccl_loss(_t(a), _t(far))) >= float(iccl_loss(_t(a), _t(b)))


def test_iccl_nonincreasing_in_negative_distance():
    a = np.zeros((3, 1, 2))
    a[1, 0] = [1.0, 0.0]
    a[2, 0] = [0.0, 1.0]
    b = a + 0.5
    spread = a * 4.0
    near = float(iccl_loss(_t(a), _t(b), IcclConfig(margin_alpha=2.0)))
    far = float(iccl_loss(_t(spread), _t(spread + 0.5), IcclConfig(margin_alpha=2.0)))
    assert far <= near


def test_iccl_symmetric_variant_averages_directions():
    rng = np.random.default_rng(6)
    a, b = _t(rng.standard_normal((4, 2, 3))), _t(rng.standard_normal((4, 2, 3)))
    forward = float(iccl_loss(a, b))
    backward = float(iccl_loss(b, a))
    symmetric = float(iccl_loss(a, b, IcclConfig(symmetric=True)))
    assert symmetric == pytest.approx(0.5 * (forward + backward), abs=1e-12)


def test_iccl_needs_two_subsegments():
    with pytest.raises(TooFewPatches):
        iccl_loss(torch.zeros(1, 2, 3), torch.zeros(1, 2, 3))


def test_iccl_config_rejects_negative_margin():
    with pytest.raises(InvalidConfig):
        IcclConfig(margin_alpha=-0.1)


def test_total_loss_additivity():
    zero = total_pretrain_loss(LossParts(terms_from_values(0, 0), terms_from_values(0, 0), torch.tensor(0.0)))
    assert zero.total == 0.0

    parts = LossParts(terms_from_values(0.2, 0.3), terms_from_values(0.2, 0.3), torch.tensor(0.5, dtype=torch.float64))
    breakdown = total_pretrain_loss(parts)
    assert breakdown.l_recon == pytest.approx(0.5, abs=1e-12)
    assert breakdown.total == pytest.approx(1.0, abs=1e-12)


def test_total_loss_averages_sides_and_honours_iccl_switch():
    parts = LossParts(terms_from_values(0.1, 0.4, channels=3), terms_from_values(0.3, 0.2, channels=3),
                      torch.tensor(0.7, dtype=torch.float64))
    breakdown = total_pretrain_loss(parts)
    assert breakdown.l_cos == pytest.approx(0.2)
    assert breakdown.l_mse == pytest.approx(0.3)
    assert breakdown.total == pytest.approx(breakdown.l_recon + breakdown.l_cl, abs=1e-12)
    assert len(breakdown.per_channel_mse) == 3

    without = total_pretrain_loss(parts, iccl_enabled=False)
    assert without.l_cl == pytest.approx(0.7)
    assert float(without.objective) == pytest.approx(without.l_recon, abs=1e-12)


def test_total_loss_summarises_graph_tensors_without_warnings():
    rng = np.random.default_rng(11)
    target = torch.from_numpy(rng.standard_normal((2, 3, 2, 4)))
    recon = torch.from_numpy(rng.standard_normal((2, 3, 2, 4))).requires_grad_(True)
    cells = torch.ones((2, 3, 2), dtype=torch.bool)
    l_cl = iccl_loss(recon, recon * 0.5)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        side = recon_terms(recon, target, cells)
        breakdown = total_pretrain_loss(LossParts(side, side, l_cl))
    assert breakdown.objective.requires_grad
    assert breakdown.total == pytest.approx(float(breakdown.objective.detach()), abs=1e-12)
    breakdown.objective.backward()
    assert recon.grad is not None


def test_target_selection_modes():
    selection = torch.tensor([[True, False, False]])
    hat, bar = target_selection(selection, "visible")
    assert hat.tolist() == [[True, False, False]] and bar.tolist() == [[False, True, True]]
    hat, bar = target_selection(selection, "hidden")
    assert hat.tolist() == [[False, True, True]]
    hat, bar = target_selection(selection, "all")
    assert hat.all() and bar.all()
    with pytest.raises(InvalidConfig):
        target_selection(selection, "masked")


def test_weighted_ce_examples():
    probabilities = _t([[0.9, 0.1], [0.2, 0.8]])
    labels = _t([[1, 0], [0, 1]])
    loss = float(weighted_ce_loss(probabilities, labels, _t([1.0, 1.0])))
    assert loss == pytest.approx(-(math.log(0.9) + math.log(0.8)) / 2, abs=1e-12)
    assert loss == pytest.approx(0.1643, abs=1e-4)

    uniform = torch.full((3, 5), 0.2, dtype=torch.float64)
    assert float(weighted_ce_loss(uniform, torch.tensor([0, 2, 4]))) == pytest.approx(math.log(5), abs=1e-12)

    perfect = torch.eye(5, dtype=torch.float64)
    assert float(weighted_ce_loss(perfect, torch.arange(5), _t([1, 2, 3, 4, 5]))) == pytest.approx(0.0, abs=1e-9)


def test_weighted_ce_uniform_weights_equal_mean_nll():
    rng = np.random.default_rng(7)
    probabilities = rng.dirichlet(np.ones(4), size=20)
    labels = rng.integers(0, 4, size=20)
    expected = -np.mean(np.log(probabilities[np.arange(20), labels]))
    assert float(weighted_ce_loss(_t(probabilities), torch.from_numpy(labels))) == pytest.approx(expected, abs=1e-12)


def test_weighted_ce_matches_oracle():
    rng = np.random.default_rng(8)
    for _ in range(1000):
        n, k = int(rng.integers(1, 6)), int(rng.integers(2, 6))
        probabilities = rng.dirichlet(np.ones(k), size=n)
        onehot = np.eye(k)[rng.integers(0, k, size=n)]
        weights = rng.uniform(0.1, 5.0, size=k)
        value = float(weighted_ce_loss(_t(probabilities), _t(onehot), _t(weights)))
        assert value == pytest.approx(weighted_ce_oracle(probabilities, onehot, weights), abs=1e-12)


def test_weighted_ce_rejects_non_stochastic_rows():
    with pytest.raises(NotStochastic):
        weighted_ce_loss(_t([[0.5, 0.6]]), torch.tensor([0]))
    with pytest.raises(DimensionMismatch):
        weighted_ce_loss(_t([[0.5, 0.5]]), torch.tensor([0, 1]))


def test_weighted_bce_examples():
    assert float(weighted_bce_loss(_t([0.5, 0.5, 0.5]), _t([1, 0, 1]))) == pytest.approx(math.log(2), abs=1e-12)
    value = float(weighted_bce_loss(_t([0.9, 0.3]), _t([1, 0])))
    assert value == pytest.approx(0.2310, abs=1e-4)
    assert float(weighted_bce_loss(_t([1.0, 0.0]), _t([1, 0]))) == pytest.approx(0.0, abs=1e-9)


def test_weighted_bce_matches_oracle():
    rng = np.random.default_rng(9)
    for _ in range(1000):
        n = int(rng.integers(1, 10))
        probabilities = rng.uniform(0.0, 1.0, size=n)
        labels = rng.integers(0, 2, size=n)
        weight = float(rng.uniform(0.1, 10.0))
        value = float(weighted_bce_loss(_t(probabilities), _t(labels), weight))
        assert value == pytest.approx(weighted_bce_oracle(probabilities, labels, weight), abs=1e-12)


def test_weighted_bce_length_mismatch():
    with pytest.raises(DimensionMismatch):
        weighted_bce_loss(_t([0.5, 0.5]), _t([1]))
