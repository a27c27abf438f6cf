import pytest
import torch

from propseg.boxes import FrameSize
from propseg.net import (
    FeaturePyramid,
    NetConfig,
    PropSegNet,
    QueryProposalSet,
    relative_coordinate_maps,
    roi_align_pyramid,
)

from fdutil import assert_gradient_matches

TINY = NetConfig(num_classes=3, num_queries=4, query_dim=64, num_stages=2,
                 feat_channels=32, roi_size=3, dyn_channels=16, attn_heads=4,
                 ffn_dim=128, bank_size=4)


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return PropSegNet(TINY).eval()


def _image(h, w, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(3, h, w, generator=g)


def test_pyramid_shapes(model):
    pyr = model.extract_features(_image(64, 64))
    assert [tuple(l.shape) for l in pyr.levels] == [
        (32, 16, 16), (32, 8, 8), (32, 4, 4), (32, 2, 2)
    ]
    pyr = model.extract_features(_image(96, 64))
    assert tuple(pyr.levels[0].shape[-2:]) == (24, 16)


def test_pyramid_rejects_undersized(model):
    with pytest.raises(ValueError):
        model.extract_features(_image(16, 64))
    with pytest.raises(ValueError):
        model.extract_features(torch.rand(1, 64, 64))


def test_extract_features_deterministic(model):
    img = _image(64, 64, seed=5)
    with torch.no_grad():
        a = model.extract_features(img)
        b = model.extract_features(img.clone())
    for la, lb in zip(a.levels, b.levels):
        assert torch.equal(la, lb)


def _constant_pyramid(value, size=64, channels=4):
    levels = [
        torch.full((channels, size // s, size // s), float(value)) for s in (4, 8, 16, 32)
    ]
    return FeaturePyramid(levels=levels, strides=(4, 8, 16, 32),
                          input_size=FrameSize(size, size))


def test_roi_align_constant_map():
    pyr = _constant_pyramid(3.25)
    boxes = torch.tensor([[5.0, 7.0, 30.0, 28.0], [0.0, 0.0, 64.0, 64.0]])
    pooled = roi_align_pyramid(pyr, boxes, out_size=5)
    assert torch.allclose(pooled, torch.full_like(pooled, 3.25), atol=1e-6)


def test_roi_align_exact_crop():
    # box aligned to the stride-4 cell grid, small enough to route to level 0
    g = torch.Generator().manual_seed(1)
    levels = [torch.rand(2, 64 // s, 64 // s, generator=g) for s in (4, 8, 16, 32)]
    pyr = FeaturePyramid(levels, (4, 8, 16, 32), FrameSize(64, 64))
    # cells rows 2..4, cols 3..5 on level 0 -> pixels [12, 8, 24, 20]
    box = torch.tensor([[12.0, 8.0, 24.0, 20.0]])
    pooled = roi_align_pyramid(pyr, box, out_size=3)
    crop = levels[0][:, 2:5, 3:6]
    assert torch.allclose(pooled[0], crop, atol=1e-5)


def test_roi_align_degenerate_box():
    pyr = _constant_pyramid(1.0)
    pooled = roi_align_pyramid(pyr, torch.tensor([[10.0, 10.0, 10.0, 10.0]]), 3)
    assert torch.isfinite(pooled).all()


def test_stage_output_contract(model):
    torch.manual_seed(2)
    pyr = model.extract_features(_image(64, 64, seed=2))
    pairs = QueryProposalSet(
        torch.randn(4, 64), torch.tensor([[1.0, 1, 20, 20]] * 4)
    )
    with torch.no_grad():
        out = model.diim_stage(pairs, pyr)
    assert out.object_features.shape == (4, 64)
    assert out.class_logits.shape == (4, 3)
    assert (out.boxes[:, 2] >= out.boxes[:, 0]).all()
    assert (out.boxes[:, 3] >= out.boxes[:, 1]).all()
    assert (out.class_probs() >= 0).all() and (out.class_probs() <= 1).all()


def test_stage_permutation_equivariance():
    torch.manual_seed(3)
    model = PropSegNet(TINY).double().eval()
    img = _image(64, 64, seed=3).double()
    pyr = model.extract_features(img)
    queries = torch.randn(4, 64, dtype=torch.float64)
    boxes = torch.tensor(
        [[2.0, 3, 20, 25], [10, 12, 40, 44], [0, 0, 64, 64], [30, 5, 60, 33]],
        dtype=torch.float64,
    )
    perm = torch.tensor([2, 0, 3, 1])
    with torch.no_grad():
        out = model.diim_stage(QueryProposalSet(queries, boxes), pyr)
        out_p = model.diim_stage(QueryProposalSet(queries[perm], boxes[perm]), pyr)
    assert torch.allclose(out.object_features[perm], out_p.object_features, atol=1e-9)
    assert torch.allclose(out.class_logits[perm], out_p.class_logits, atol=1e-9)
    assert torch.allclose(out.boxes[perm], out_p.boxes, atol=1e-9)


def test_seg_head_single_stage_equals_diim(model):
    torch.manual_seed(4)
    pyr = model.extract_features(_image(64, 64, seed=4))
    pairs = QueryProposalSet(torch.randn(4, 64), torch.tensor([[0.0, 0, 32, 32]] * 4))
    with torch.no_grad():
        single = model.seg_head_forward(pairs, pyr, num_stages=1)
        direct = model.diim_stage(pairs, pyr)
    assert len(single) == 1
    assert torch.equal(single[0].boxes, direct.boxes)
    assert torch.equal(single[0].class_logits, direct.class_logits)


def test_seg_head_chains_stages(model):
    torch.manual_seed(5)
    pyr = model.extract_features(_image(64, 64, seed=5))
    pairs = QueryProposalSet(torch.randn(4, 64), torch.tensor([[0.0, 0, 40, 40]] * 4))
    with torch.no_grad():
        outs = model.seg_head_forward(pairs, pyr)
    assert len(outs) == 2
    assert not torch.equal(outs[0].boxes, outs[1].boxes)
    with pytest.raises(ValueError):
        model.seg_head_forward(pairs, pyr, num_stages=0)
    with pytest.raises(ValueError):
        model.seg_head_forward(pairs, pyr, num_stages=99)


def test_default_stage_count_is_six():
    assert NetConfig().num_stages == 6
    assert NetConfig().num_queries == 100
    assert NetConfig().bank_size == 18


def test_mask_branch_shape_and_determinism(model):
    pyr = model.extract_features(_image(64, 64, seed=6))
    with torch.no_grad():
        mf1 = model.mask_features(pyr)
        mf2 = model.mask_features(pyr)
    assert mf1.shape == (8, 8, 8)
    assert torch.equal(mf1, mf2)
    pyr96 = model.extract_features(_image(96, 64, seed=6))
    with torch.no_grad():
        assert model.mask_features(pyr96).shape == (8, 12, 8)


def test_mask_branch_uses_every_level(model):
    pyr = model.extract_features(_image(64, 64, seed=7))
    with torch.no_grad():
        base = model.mask_features(pyr)
        for lvl in range(4):
            levels = [l.clone() for l in pyr.levels]
            levels[lvl] = levels[lvl] + 0.5
            perturbed = FeaturePyramid(levels, pyr.strides, pyr.input_size)
            assert not torch.equal(model.mask_features(perturbed), base), lvl


def test_coordinate_maps_translate_exactly():
    fs = FrameSize(64, 64)
    b1 = torch.tensor([[10.0, 12.0, 30.0, 40.0]])
    shift = torch.tensor([[8.0, -4.0, 8.0, -4.0]])
    m1 = relative_coordinate_maps(b1, (8, 8), fs)
    m2 = relative_coordinate_maps(b1 + shift, (8, 8), fs)
    scale = fs.diagonal / 8.0
    assert torch.allclose(m2[:, 0], m1[:, 0] - 8.0 / scale, atol=1e-6)
    assert torch.allclose(m2[:, 1], m1[:, 1] + 4.0 / scale, atol=1e-6)


def test_predict_mask_contract(model):
    pyr = model.extract_features(_image(64, 64, seed=8))
    with torch.no_grad():
        mf = model.mask_features(pyr)
        probs = model.predict_masks(torch.randn(3, 64), mf,
                                    torch.tensor([[4.0, 4, 24, 24]] * 3),
                                    FrameSize(64, 64))
    assert probs.shape == (3, 64, 64)
    assert (probs >= 0).all() and (probs <= 1).all()
    with torch.no_grad():
        empty = model.predict_masks(torch.zeros(0, 64), mf,
                                    torch.zeros(0, 4), FrameSize(64, 64))
    assert empty.shape == (0, 64, 64)


def test_diim_stage_gradient():
    torch.manual_seed(11)
    model = PropSegNet(TINY).double()
    img = _image(64, 64, seed=11).double()
    pyr = model.extract_features(img)
    boxes = torch.tensor(
        [[3.0, 5, 25, 30], [12, 8, 50, 40], [5, 30, 33, 60], [20, 20, 44, 44]],
        dtype=torch.float64,
    )
    queries = torch.randn(4, 64, dtype=torch.float64)
    wf = torch.randn(4, 64, dtype=torch.float64)
    wl = torch.randn(4, 3, dtype=torch.float64)
    wb = torch.randn(4, 4, dtype=torch.float64) * 0.01

    def scalar():
        out = model.diim_stage(QueryProposalSet(queries, boxes), pyr)
        return (
            (out.object_features * wf).sum()
            + (out.class_logits * wl).sum()
            + (out.boxes * wb).sum()
        )

    assert_gradient_matches(scalar, queries)


def test_predict_mask_gradient():
    torch.manual_seed(12)
    model = PropSegNet(TINY).double()
    pyr = model.extract_features(_image(64, 64, seed=12).double())
    mf = model.mask_features(pyr).detach()
    feats = torch.randn(1, 64, dtype=torch.float64)
    boxes = torch.tensor([[6.0, 10, 30, 36]], dtype=torch.float64)
    w = torch.randn(1, 64, 64, dtype=torch.float64)

    def scalar():
        return (model.predict_masks(feats, mf, boxes, FrameSize(64, 64)) * w).sum()

    assert_gradient_matches(scalar, feats)


@pytest.mark.parametrize("h,w", [(32, 160), (128, 96), (96, 96)])
def test_mask_branch_shape_for_divisible_sizes(model, h, w):
    pyr = model.extract_features(_image(h, w, seed=9))
    with torch.no_grad():
        mf = model.mask_features(pyr)
    assert mf.shape == (8, h // 8, w // 8)
