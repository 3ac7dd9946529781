import json

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from ciml.blocks import CIMLModel
from ciml.cam import (EmptyRegion, HeatmapStack, UndefinedWeights, complementary_weights, default_segmentor,
                      extract_complementary_cam, gradcam_alpha, gradcam_heatmap, normalize_jointly, region_crop,
                      save_overlays, save_weight_bars, segmentor_cams, weight_table, write_weights_json)
from ciml.config import ArchitectureConfig, ExperimentConfig, RegionId, brats_assignment

WT = RegionId("WT", 1)


def test_alpha_examples():
    a = torch.rand(3, 2, 2, requires_grad=True)
    assert torch.allclose(gradcam_alpha(a, a[0].sum() / 4), torch.tensor([0.25, 0.0, 0.0]))
    assert torch.equal(gradcam_alpha(a, torch.tensor(5.0)), torch.zeros(3))
    assert torch.allclose(gradcam_alpha(a, a.sum()), torch.ones(3))
    with pytest.raises(ValueError):
        gradcam_alpha(a.detach(), a.sum())


def test_alpha_matches_finite_differences():
    torch.manual_seed(0)
    net = torch.nn.Sequential(torch.nn.Conv2d(4, 3, 3, padding=1), torch.nn.Tanh(),
                              torch.nn.Conv2d(3, 1, 1)).double()
    feats = torch.randn(1, 4, 6, 6, dtype=torch.float64, requires_grad=True)

    def score(x):
        return (net(x) ** 2).sum()

    alpha = gradcam_alpha(feats, score(feats), channel_dim=1)
    n, h = 36, 1e-6
    with torch.no_grad():
        for c in range(4):
            bump = torch.zeros_like(feats)
            bump[:, c] = h
            # a uniform shift of channel c sums the voxel gradients
            fd = (score(feats + bump) - score(feats - bump)) / (2 * h) / n
            assert float(fd) == pytest.approx(float(alpha[c]), rel=1e-3)


def test_heatmap_examples():
    a = torch.tensor([[[1.0, 2.0]], [[3.0, 0.5]]])  # [C=2, 1, 2]
    assert torch.equal(gradcam_heatmap(a, torch.tensor([-1.0, -2.0])), torch.zeros(1, 2))
    x = torch.tensor([[[-1.0, 2.0]]])
    assert torch.equal(gradcam_heatmap(x, torch.tensor([1.0])), torch.relu(x[0]))
    # 1*A0 - 1*A1 = [-2, 1.5] -> [0, 1.5]
    assert torch.equal(gradcam_heatmap(a, torch.tensor([1.0, -1.0])), torch.tensor([[0.0, 1.5]]))
    with pytest.raises(ValueError):
        gradcam_heatmap(a, torch.ones(3))


def stack(aux, mass):
    return HeatmapStack("S", aux, WT, np.full((2, 2), mass / 4.0), np.zeros(1))


def test_weight_examples():
    assert complementary_weights([stack("A", 2.0)]) == {"A": 1.0}
    assert complementary_weights([stack("A", 2.0), stack("B", 2.0)]) == {"A": 0.5, "B": 0.5}
    assert complementary_weights([stack("A", 3.0), stack("B", 1.0)]) == {"A": 0.75, "B": 0.25}
    with pytest.raises(UndefinedWeights):
        complementary_weights([stack("A", 0.0), stack("B", 0.0)])
    with pytest.raises(ValueError):
        HeatmapStack("S", "A", WT, -np.ones(2), np.zeros(1))


@given(st.lists(st.floats(0.0, 1e3), min_size=1, max_size=5).filter(lambda m: sum(m) > 1e-6),
       st.floats(1e-3, 1e3))
def test_weights_form_simplex_and_ignore_common_scale(masses, scale):
    stacks = [stack(f"M{i}", m) for i, m in enumerate(masses)]
    w = complementary_weights(stacks)
    assert all(v >= 0 for v in w.values())
    assert sum(w.values()) == pytest.approx(1.0, abs=1e-9)
    scaled = [stack(f"M{i}", m * scale) for i, m in enumerate(masses)]
    assert complementary_weights(scaled) == pytest.approx(w, abs=1e-9)
    assert complementary_weights(normalize_jointly(stacks)) == pytest.approx(w, abs=1e-9)


@pytest.fixture
def toy_model():
    torch.manual_seed(0)
    cfg = ExperimentConfig(brats_assignment(), ArchitectureConfig(patch_size=16, base_filters=2))
    model = CIMLModel(cfg)
    with torch.no_grad():
        # make every segmentor predict its first local class (WT for T2) everywhere
        for seg in model.segmentor.values():
            seg.out.bias.zero_()
            seg.out.bias[1] = 10.0
    return model


def inputs(model, seed=0):
    g = torch.Generator().manual_seed(seed)
    return {n: torch.randn(1, 1, 16, 16, 16, generator=g) for n in model.names}


def test_t2_wt_heatmap_contract(toy_model):
    s = extract_complementary_cam(toy_model, inputs(toy_model), "FLAIR", WT, segmentor="T2")
    assert s.segmentor == "T2" and s.auxiliary == "FLAIR"
    assert s.zeta.shape == (16, 16, 16)
    assert np.all(s.zeta >= 0)
    assert s.alpha.shape == (2,)  # channels at the shallowest stage
    stacks = segmentor_cams(toy_model, inputs(toy_model), "T2", WT)
    assert [x.auxiliary for x in stacks] == ["FLAIR", "T1", "T1CE"]
    assert toy_model.training  # mode restored
    assert default_segmentor(toy_model, "T2", WT) == "FLAIR"


def test_severed_message_path_gives_zero_map(toy_model):
    cig = toy_model.segmentor["T2"].cig["1"]
    with torch.no_grad():
        for conv in cig.align:
            conv.weight.zero_()
    stacks = segmentor_cams(toy_model, inputs(toy_model), "T2", WT)
    for s in stacks:
        assert np.all(s.zeta == 0)
    with pytest.raises(UndefinedWeights):
        complementary_weights(stacks)


def test_errors(toy_model):
    with pytest.raises(ValueError):
        segmentor_cams(toy_model, inputs(toy_model), "FLAIR", RegionId("ET", 3))
    with torch.no_grad():
        toy_model.segmentor["T2"].out.bias[1] = -10.0
        toy_model.segmentor["T2"].out.bias[0] = 10.0
    with pytest.raises(EmptyRegion):
        segmentor_cams(toy_model, inputs(toy_model), "T2", WT)


def test_region_crop_and_weight_table(toy_model, tmp_path):
    class Case:
        pass

    rng = np.random.default_rng(0)
    case = Case()
    case.mask = np.zeros((20, 20, 20), int)
    case.mask[12:18, 12:18, 12:18] = 1
    case.volumes = {n: rng.normal(size=(20, 20, 20)).astype(np.float32) for n in toy_model.names}
    crop = region_crop(case.volumes, case.mask, WT, 16)
    assert tuple(crop["T2"].shape) == (1, 1, 16, 16, 16)
    assert torch.equal(crop["T2"][0, 0], torch.from_numpy(case.volumes["T2"][4:20, 4:20, 4:20]))
    with pytest.raises(EmptyRegion):
        region_crop(case.volumes, np.zeros_like(case.mask), WT, 16)
    table = weight_table(toy_model, [case, case], "T2", WT)
    assert sum(table.values()) == pytest.approx(1.0, abs=1e-9)
    write_weights_json(tmp_path / "w.json", {"T2": {"WT": table}}, 2)
    data = json.loads((tmp_path / "w.json").read_text())
    assert data["averaged_over_cases"] == 2 and set(data["weights"]["T2"]["WT"]) == {"FLAIR", "T1", "T1CE"}
    stacks = segmentor_cams(toy_model, crop, "T2", WT)
    save_overlays(tmp_path / "o.png", crop["T2"][0, 0].numpy(), stacks)
    save_weight_bars(tmp_path / "b.png", {"T2/WT": table})
    assert (tmp_path / "o.png").stat().st_size > 0 and (tmp_path / "b.png").stat().st_size > 0
