import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ciml.shapes import (DemoConfig, DemoTrainConfig, ShapePair, acceptable, build_demo_model, complementary_map,
                         evaluate_localization, export_figure, fill_ellipse, fill_triangle, generate_dataset,
                         latent_stats, load_demo_model, load_pairs, localization_score, predict, save_demo_model,
                         save_pairs, split, to_tensors, train_demo, training_loss, union_dice)


def check_pair(pair, size):
    assert pair.primary.shape == pair.auxiliary.shape == (size, size)
    assert pair.primary.dtype == bool and pair.auxiliary.dtype == bool
    assert np.array_equal(pair.union, pair.primary | pair.auxiliary)
    assert np.array_equal(pair.overlap, pair.primary & pair.auxiliary)
    assert np.array_equal(pair.aux_exclusive, pair.auxiliary & ~pair.primary)
    # exclusive part and overlap partition the auxiliary shape
    assert not np.any(pair.overlap & pair.aux_exclusive)
    assert np.array_equal(pair.overlap | pair.aux_exclusive, pair.auxiliary)
    assert acceptable(pair.primary, pair.auxiliary)


@settings(max_examples=15)
@given(st.integers(1, 6), st.sampled_from([32, 48, 64]), st.integers(0, 2 ** 16))
def test_generated_pairs_satisfy_mask_identities(n, size, seed):
    pairs = generate_dataset(n, size, seed)
    assert len(pairs) == n
    for i, p in enumerate(pairs):
        check_pair(p, size)
        assert p.primary_kind == ("triangle" if i % 2 == 0 else "ellipse")


def test_generation_is_deterministic():
    a, b = generate_dataset(5, 64, 11), generate_dataset(5, 64, 11)
    for x, y in zip(a, b):
        assert x.primary.tobytes() == y.primary.tobytes() and x.auxiliary.tobytes() == y.auxiliary.tobytes()
    c = generate_dataset(5, 64, 12)
    assert any(not np.array_equal(x.primary, z.primary) for x, z in zip(a, c))


def test_single_pair_and_argument_checks():
    (pair,) = generate_dataset(1, 64, 0)
    check_pair(pair, 64)
    with pytest.raises(ValueError):
        generate_dataset(0)
    with pytest.raises(ValueError):
        generate_dataset(2, 16)


def test_fill_helpers():
    tri = fill_triangle(8, np.array([[0.0, 0.0], [8.0, 0.0], [0.0, 8.0]]))
    assert tri[0, 0] and not tri[7, 7]
    assert tri.sum() == 36  # pixel centres with row + col < 7
    ell = fill_ellipse(8, (4.0, 4.0), (2.0, 2.0), 0.0)
    assert ell[4, 4] and not ell[0, 0]


def test_split_keeps_last_tenth():
    pairs = generate_dataset(20, 32, 0)
    train, test = split(pairs)
    assert len(train) == 18 and len(test) == 2
    assert test[0] is pairs[18]


def test_model_output_shapes_and_mean_mode():
    model = build_demo_model(DemoConfig(image_size=32), seed=0)
    p, a, _ = to_tensors(generate_dataset(2, 32, 0))
    out = model(p, a, "sample")
    assert tuple(out.logits.shape) == (2, 2, 32, 32)
    # the complementary latent stays at image resolution
    assert tuple(out.latent.mu.shape) == (2, 4, 32, 32)
    zero = model(p, a, torch.zeros_like(out.latent.mu))
    assert torch.equal(zero.latent.kappa, zero.latent.mu)
    mean = model(p, a, "mean")
    assert torch.equal(mean.latent.kappa, mean.latent.mu)
    with pytest.raises(ValueError):
        model(p, a, torch.zeros(1, 4, 32, 32))


def test_localization_examples():
    primary = np.zeros((4, 4), bool)
    aux = np.zeros((4, 4), bool)
    primary[:2, :2] = True
    aux[:2, 1:4] = True  # overlaps primary on column 1
    pair = ShapePair(primary, aux, "triangle")
    assert localization_score(pair.aux_exclusive.astype(float), pair) == 1.0
    uniform = (pair.aux_exclusive | primary).astype(float)
    assert pair.aux_exclusive.sum() == primary.sum()
    assert localization_score(uniform, pair) == 0.5
    with pytest.raises(ValueError):
        localization_score(np.zeros((4, 4)), pair)


def test_complementary_map_normalisation():
    mu = np.stack([np.arange(4.0).reshape(2, 2), -np.arange(4.0).reshape(2, 2)])
    cmap = complementary_map(mu)
    assert cmap.min() == 0.0 and cmap.max() == 1.0
    assert np.allclose(complementary_map(np.ones((2, 3, 3))), 1.0)
    with pytest.raises(ValueError):
        complementary_map(np.zeros((2, 3, 3)))


def test_short_training_run_and_persistence(tmp_path):
    pairs = generate_dataset(24, 32, 5)
    model = build_demo_model(DemoConfig(image_size=32), seed=0)
    before = training_loss(model, pairs)
    history = train_demo(model, pairs, DemoTrainConfig(epochs=4, iterations_per_epoch=3, batch_size=8))
    assert [h["epoch"] for h in history] == [0, 1, 2, 3]
    assert all(np.isfinite([h["ce"], h["dice"], h["kl"]]).all() for h in history)
    assert training_loss(model, pairs) < before
    stats = latent_stats(model, pairs)
    assert stats["kl"] >= 0
    assert 0 <= union_dice(model, pairs) <= 1
    assert 0 <= evaluate_localization(model, pairs) <= 1

    ckpt = tmp_path / "demo.ckpt"
    save_demo_model(ckpt, model, {"epochs": 4})
    loaded, meta = load_demo_model(ckpt)
    assert loaded.cfg == model.cfg
    assert np.array_equal(predict(loaded, pairs)[1], predict(model, pairs)[1])
    export_figure(model, pairs[:2], tmp_path / "fig.png")
    assert (tmp_path / "fig.png").stat().st_size > 0


def test_pair_storage_roundtrip(tmp_path):
    pairs = generate_dataset(3, 32, 2)
    save_pairs(tmp_path / "d", pairs)
    back = load_pairs(tmp_path / "d")
    for x, y in zip(pairs, back):
        assert np.array_equal(x.primary, y.primary) and np.array_equal(x.auxiliary, y.auxiliary)
        assert x.primary_kind == y.primary_kind
