import numpy as np
import pytest
import torch

from src.errors import InvalidConfig, NonFiniteActivation, ShapeMismatch
from src.losses import recon_terms
from src.model import ModelConfig, PsgMae, from_segments, to_segments


def _small_config(**changes):
    base = ModelConfig(c=5, n_patch=4, l_prime=6, d_model=16, encoder_layers=2, attention_heads=2,
                       feedforward_dim=32, decoder_hidden=32, head_channels=8, num_classes=5, dropout_rate=0.0)
    return base.replace(**changes)


def _model(cfg=None, seed=0):
    return PsgMae.initialized(cfg or _small_config(), seed).double().eval()


def _segments(cfg, batch=3, seed=0):
    rng = np.random.default_rng(seed)
    return torch.from_numpy(rng.standard_normal((batch, cfg.n_patch, cfg.c, cfg.l_prime)))


def _selection(cfg, batch=3, seed=0):
    rng = np.random.default_rng(seed)
    ranks = np.argsort(rng.random((batch, cfg.n_patch, cfg.c)), axis=-1)
    selection = np.zeros((batch, cfg.n_patch, cfg.c), dtype=bool)
    np.put_along_axis(selection, ranks[..., : cfg.c // 2], True, axis=-1)
    return torch.from_numpy(selection)


def test_config_validation():
    with pytest.raises(InvalidConfig):
        ModelConfig(d_model=10, attention_heads=4)
    with pytest.raises(InvalidConfig):
        ModelConfig(head_branch_kernels=(3, 4))
    with pytest.raises(InvalidConfig):
        ModelConfig(dropout_rate=1.0)


def test_embed_zero_input_gives_positional_encoding():
    cfg = _small_config()
    model = _model(cfg)
    tokens = model.embed(torch.zeros(1, cfg.n_patch, cfg.c, cfg.l_prime, dtype=torch.float64))
    assert tokens.shape == (1, cfg.n_patch, cfg.d_model)
    assert torch.equal(tokens[0], model.positional)


def test_embed_is_linear_without_bias():
    cfg = _small_config()
    model = _model(cfg)
    x = _segments(cfg, batch=1)
    once = model.embed(x) - model.positional
    twice = model.embed(2.0 * x) - model.positional
    torch.testing.assert_close(twice, 2.0 * once)


def test_embed_rejects_wrong_shape():
    cfg = _small_config()
    with pytest.raises(ShapeMismatch):
        _model(cfg).embed(torch.zeros(1, cfg.n_patch, cfg.c, cfg.l_prime + 1, dtype=torch.float64))


def test_attention_rows_are_stochastic():
    cfg = _small_config()
    model = _model(cfg)
    features, attention = model.encode(model.embed(_segments(cfg)), return_attention=True)
    assert features.shape == (3, cfg.n_patch, cfg.d_model)
    assert len(attention) == cfg.encoder_layers
    for weights in attention:
        assert weights.shape == (3, cfg.attention_heads, cfg.n_patch, cfg.n_patch)
        torch.testing.assert_close(weights.sum(dim=-1), torch.ones(weights.shape[:-1], dtype=weights.dtype),
                                   rtol=0, atol=1e-6)


def test_encoder_is_permutation_equivariant_without_positions():
    cfg = _small_config()
    model = _model(cfg)
    tokens = torch.randn(2, cfg.n_patch, cfg.d_model, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    order = torch.tensor([2, 0, 3, 1])
    torch.testing.assert_close(model.encode(tokens[:, order]), model.encode(tokens)[:, order])


def test_encoder_reports_non_finite_tokens():
    cfg = _small_config()
    tokens = torch.full((1, cfg.n_patch, cfg.d_model), float("nan"), dtype=torch.float64)
    with pytest.raises(NonFiniteActivation) as excinfo:
        _model(cfg).encode(tokens)
    assert excinfo.value.layer == 0


def test_decoder_shapes_and_sharing():
    cfg = _small_config()
    model = _model(cfg)
    zeros = torch.zeros(1, cfg.n_patch, cfg.d_model, dtype=torch.float64)
    assert torch.count_nonzero(model.decode(zeros)) == 0

    token = torch.randn(1, 1, cfg.d_model, dtype=torch.float64)
    out = model.decode(token.expand(1, cfg.n_patch, cfg.d_model))
    for n in range(1, cfg.n_patch):
        torch.testing.assert_close(out[0, n], out[0, 0], rtol=0, atol=1e-12)


def test_default_decoder_reassembles_full_epoch():
    cfg = ModelConfig(dropout_rate=0.0)
    model = PsgMae.initialized(cfg, 0).eval()
    with torch.no_grad():
        recon = model.reconstruct(torch.zeros(1, cfg.n_patch, cfg.c, cfg.l_prime))
    assert from_segments(recon).shape == (1, 5, 3000)


def test_head_outputs_probabilities():
    cfg = _small_config()
    model = _model(cfg)
    probabilities = model.head_forward(torch.randn(4, cfg.n_patch, cfg.d_model, dtype=torch.float64))
    assert probabilities.shape == (4, 5)
    torch.testing.assert_close(probabilities.sum(dim=1), torch.ones(4, dtype=torch.float64), rtol=0, atol=1e-6)


def test_head_global_pooling_of_constant_features():
    cfg = _small_config()
    model = _model(cfg)
    constant = torch.full((2, 3, cfg.n_patch), 0.75, dtype=torch.float64)
    pooled = model.head.global_pool(constant).flatten(1)
    assert torch.equal(pooled, torch.full((2, 3), 0.75, dtype=torch.float64))


def test_reset_head_changes_category_count():
    cfg = _small_config()
    model = _model(cfg)
    model.reset_head(2, seed=3)
    assert model.cfg.num_classes == 2
    assert model.classify(_segments(cfg)).shape == (3, 2)


@pytest.mark.parametrize("c", [2, 5])
@pytest.mark.parametrize("n_patch", [2, 10, 30])
def test_shape_contract(c, n_patch):
    cfg = ModelConfig(c=c, n_patch=n_patch, l_prime=4, d_model=8, encoder_layers=1, attention_heads=2,
                      feedforward_dim=8, decoder_hidden=8, head_channels=4, num_classes=3, dropout_rate=0.0)
    model = _model(cfg)
    segments = _segments(cfg, batch=2)
    out = model.forward_pretrain(segments, _selection(cfg, batch=2))
    assert out.recon_hat.shape == segments.shape
    assert out.recon_bar.shape == segments.shape
    assert len(out.loss.per_channel_mse) == c
    assert model.classify(segments).shape == (2, 3)


def test_to_segments_round_trip():
    epochs = torch.arange(2 * 3 * 12, dtype=torch.float64).reshape(2, 3, 12)
    segments = to_segments(epochs, 4)
    assert segments.shape == (2, 4, 3, 3)
    assert torch.equal(segments[0, 1, 2], epochs[0, 2, 3:6])
    assert torch.equal(from_segments(segments), epochs)
    with pytest.raises(ShapeMismatch):
        to_segments(epochs, 5)


def test_swapping_mask_sides_swaps_reconstructions():
    cfg = _small_config()
    model = _model(cfg)
    segments, selection = _segments(cfg), _selection(cfg)
    forward = model.forward_pretrain(segments, selection)
    swapped = model.forward_pretrain(segments, ~selection)
    torch.testing.assert_close(swapped.recon_hat, forward.recon_bar)
    torch.testing.assert_close(swapped.recon_bar, forward.recon_hat)
    assert swapped.loss.l_recon == pytest.approx(forward.loss.l_recon, abs=1e-12)


def test_untrained_mse_near_predict_zero_baseline():
    cfg = _small_config()
    model = _model(cfg)
    segments, selection = _segments(cfg, batch=8), _selection(cfg, batch=8)
    loss = model.forward_pretrain(segments, selection).loss
    baseline = float((segments ** 2).mean())
    assert baseline / 3 < loss.l_mse < 3 * baseline


def test_forward_is_deterministic_without_dropout():
    cfg = _small_config()
    model = _model(cfg)
    segments, selection = _segments(cfg), _selection(cfg)
    first = model.forward_pretrain(segments, selection).loss
    second = model.forward_pretrain(segments, selection).loss
    assert first.to_dict() == second.to_dict()


def test_initialization_is_a_function_of_seed():
    cfg = _small_config()
    a, b, c = _model(cfg, seed=4), _model(cfg, seed=4), _model(cfg, seed=5)
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))
    assert not torch.equal(a.embedding.weight, c.embedding.weight)
    assert a.parameter_count() == c.parameter_count()


def test_shared_weights_accumulate_both_sides():
    cfg = _small_config()
    model = _model(cfg)
    segments, selection = _segments(cfg, batch=2), _selection(cfg, batch=2)

    model.zero_grad()
    model.forward_pretrain(segments, selection, iccl_enabled=False).loss.objective.backward()
    joint = {name: p.grad.clone() for name, p in model.named_parameters() if p.grad is not None}

    keep = selection.unsqueeze(-1).to(segments.dtype)
    side_grads = []
    for masked, cells in ((segments * keep, selection), (segments * (1 - keep), ~selection)):
        model.zero_grad()
        terms = recon_terms(model.reconstruct(masked), segments, cells)
        (0.5 * (terms.l_cos + terms.l_mse)).backward()
        side_grads.append({name: p.grad.clone() for name, p in model.named_parameters() if p.grad is not None})

    assert joint
    for name, grad in joint.items():
        torch.testing.assert_close(grad, side_grads[0][name] + side_grads[1][name])


@pytest.mark.slow
def test_overfits_a_single_batch():
    cfg = _small_config(d_model=32, feedforward_dim=64, decoder_hidden=64)
    model = PsgMae.initialized(cfg, 0).double().train()
    segments, selection = _segments(cfg, batch=4), _selection(cfg, batch=4)
    optimizer = torch.optim.Adam(model.parameters(), lr=3e-3)
    initial = None
    for _ in range(500):
        optimizer.zero_grad()
        loss = model.forward_pretrain(segments, selection).loss
        initial = loss.total if initial is None else initial
        loss.objective.backward()
        optimizer.step()
    final = model.forward_pretrain(segments, selection).loss.total
    assert final < 0.1 * initial
