import dataclasses

import numpy as np
import pytest

from ndtplace import autodiff as ad
from ndtplace.autodiff import Tensor, grad_check
from ndtplace.condenser import CondenserConfig
from ndtplace.model import CardinalityError, ModelConfig, PlaceNet, embed, stack_maps
from ndtplace.ndt import NdtMap, regularize_cov

TINY = ModelConfig(
    k=8,
    d_model=16,
    heads=2,
    vlad_clusters=4,
    d_ff=32,
    vlad_in=16,
    out_dim=8,
    tnet_point_widths=(8, 16),
    tnet_fc_widths=(16,),
)
# a train-mode BatchNorm downstream cancels any per-channel shift these add (max-pool
# then the T-Net FC stack; the skip concat then the bottom stack), so their true
# gradient is exactly zero in training mode; they are checked in eval mode
SHIFT_INVARIANT = {"tnet.points.norms.1.beta", "encoders.2.norm2.beta"}


def random_maps(rng, n, k):
    maps = []
    for _ in range(n):
        a = rng.normal(size=(k, 3, 3)) * 0.4
        covs = regularize_cov(a @ np.swapaxes(a, -1, -2))
        maps.append(NdtMap(rng.normal(size=(k, 3)) * 4, covs, np.full(k, 5), 1.0))
    return maps


def batch(rng, n=2, k=8):
    return stack_maps(random_maps(rng, n, k))


def exercised_model(seed, cfg=TINY):
    """Tiny model whose T-Net output weight is perturbed so every T-Net parameter carries gradient."""
    model = PlaceNet(cfg, seed=seed)
    rng = np.random.default_rng(seed + 7)
    if model.tnet is not None:
        model.tnet.out.weight.data = rng.normal(scale=0.05, size=model.tnet.out.weight.shape)
    return model


def loss_fn(model, means, covs, seed):
    w = np.random.default_rng(seed + 99).normal(size=(means.shape[0], model.cfg.out_dim))
    return lambda: (model(Tensor(means), Tensor(covs)) * w).sum()


@pytest.mark.parametrize("seed", range(5))
def test_input_gradient(seed):
    rng = np.random.default_rng(seed)
    means, covs = batch(rng)
    model = exercised_model(seed)
    w = np.random.default_rng(seed + 99).normal(size=(2, TINY.out_dim))
    err = grad_check(lambda m, c: (model(m, c) * w).sum(), [means, covs])
    assert err < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_parameter_gradients_sampled(seed):
    rng = np.random.default_rng(seed)
    # two submaps would make the T-Net's pooled BatchNorm degenerate (outputs +-1)
    means, covs = batch(rng, n=4)
    model = exercised_model(seed)
    f = loss_fn(model, means, covs, seed)
    params = [p for name, p in model.named_parameters() if name not in SHIFT_INVARIANT]
    assert grad_check(lambda *_: f(), params, max_elems=6, seed=seed) < 1e-4
    model.eval()
    named = dict(model.named_parameters())
    assert grad_check(lambda *_: f(), [named[n] for n in sorted(SHIFT_INVARIANT)]) < 1e-4


def test_transform_is_identity_at_init(rng):
    model = PlaceNet(TINY, seed=3)
    means, _ = batch(rng)
    T = model.transform(Tensor(means)).data
    np.testing.assert_array_equal(T, np.broadcast_to(np.eye(3), T.shape))


def test_descriptors_are_unit_norm(rng):
    model = PlaceNet(TINY, seed=0).eval()
    out = embed(model, random_maps(rng, 5, 8))
    assert out.shape == (5, TINY.out_dim)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)


def test_embed_workers_match_serial(rng):
    model = PlaceNet(TINY, seed=0)
    maps = random_maps(rng, 9, 8)
    serial = embed(model, maps, batch_size=2)
    np.testing.assert_array_equal(embed(model, maps, batch_size=2, workers=3), serial)
    assert model.training, "embed must restore the caller's mode"


@pytest.mark.parametrize("seed", range(3))
def test_cell_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    model = exercised_model(seed).eval()
    (ndt,) = random_maps(rng, 1, 8)
    ref = embed(model, ndt)
    for _ in range(10):
        perm = rng.permutation(8)
        out = embed(model, ndt.take(perm))
        assert np.abs(out - ref).max() < 1e-6


def test_cardinality_mismatch(rng):
    model = PlaceNet(TINY, seed=0)
    means, covs = batch(rng, k=9)
    with pytest.raises(CardinalityError, match="cardinality mismatch"):
        model(means, covs)
    with pytest.raises(CardinalityError):
        stack_maps(random_maps(rng, 1, 8) + random_maps(rng, 1, 9))


def test_points_only_zeroes_covariance(rng):
    model = PlaceNet(dataclasses.replace(TINY, use_points_only=True), seed=0)
    means, covs = batch(rng)
    feats = model.features(Tensor(means), Tensor(covs)).data
    assert np.all(feats[..., 3:] == 0.0)
    assert np.any(feats[..., :3] != 0.0)


def test_cov_only_zeroes_means(rng):
    model = PlaceNet(dataclasses.replace(TINY, use_cov_only=True), seed=0)
    means, covs = batch(rng)
    feats = model.features(Tensor(means), Tensor(covs)).data
    assert np.all(feats[..., :3] == 0.0)
    assert np.any(feats[..., 3:] != 0.0)


def test_no_tnet_passes_raw_features(rng):
    model = PlaceNet(dataclasses.replace(TINY, use_tnet=False), seed=0)
    assert model.tnet is None and model.transform(Tensor(np.zeros((1, 8, 3)))) is None
    maps = random_maps(rng, 2, 8)
    means, covs = stack_maps(maps)
    feats = model.features(Tensor(means), Tensor(covs)).data
    np.testing.assert_array_equal(feats, np.stack([m.features() for m in maps]))


def test_exclusive_ablations():
    with pytest.raises(ValueError):
        ModelConfig(use_points_only=True, use_cov_only=True)
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, heads=4)


def test_config_round_trip():
    assert ModelConfig.from_dict(TINY.to_dict()) == TINY
    # widths follow d_model unless pinned
    assert dataclasses.replace(TINY, d_model=32).head_stack == (32, 32)


def test_state_dict_round_trip(rng):
    a = PlaceNet(TINY, seed=0)
    means, covs = batch(rng)
    a(means, covs)  # move BatchNorm buffers off their defaults
    b = PlaceNet(TINY, seed=1)
    b.load_state_dict(a.state_dict())
    a.eval(), b.eval()
    np.testing.assert_array_equal(a(means, covs).data, b(means, covs).data)
    with pytest.raises(KeyError):
        b.load_state_dict({"nope": np.zeros(1)})


def test_float32_forward(rng):
    model = PlaceNet(TINY, seed=0, dtype=np.float32)
    means, covs = batch(rng)
    out = model(means, covs)
    assert out.dtype == np.float32
    out.sum().backward()
    assert all(p.grad is None or p.grad.dtype == np.float32 for p in model.parameters())


def test_dropout_is_step_keyed(rng):
    model = PlaceNet(dataclasses.replace(TINY, dropout=0.5), seed=0)
    means, covs = batch(rng)
    with ad.no_grad():
        first = model(means, covs).data
        again = model(means, covs).data
    np.testing.assert_array_equal(first, again)


def test_full_size_defaults_shapes():
    cfg = ModelConfig()
    assert (cfg.d_model, cfg.heads, cfg.encoders, cfg.vlad_clusters, cfg.vlad_in, cfg.out_dim) == (256, 4, 3, 64, 1024, 256)
    assert CondenserConfig().k == 2000
