import numpy as np
import pytest

from dttn.errors import ConfigurationError, DimensionError
from dttn.layers import grad_check
from dttn.model import (
    DttnModel,
    ModelConfig,
    PatchEmbed,
    Downsample,
    Head,
    aim_params,
    build,
    count_flops_analytic,
    count_params_analytic,
    embed_params,
    enumerate_params,
    head_params,
    predict,
    preset,
    zero_biases,
)


def desk(**kw):
    return preset("desk", **kw)


@pytest.mark.parametrize("name,n", [("tiny", 34), ("small", 44), ("large", 56), ("desk", 10)])
def test_preset_block_counts(name, n):
    assert preset(name).n_blocks == n


def test_preset_unknown_and_validation():
    with pytest.raises(ConfigurationError):
        preset("huge")
    with pytest.raises(ConfigurationError):
        desk(img_size=(28, 28)).validate()
    with pytest.raises(ConfigurationError):
        desk(stage_blocks=(2, 2, 4)).validate()
    with pytest.raises(ConfigurationError):
        desk(stage_blocks=(0, 0, 0, 0)).validate()
    with pytest.raises(ConfigurationError):
        desk(dtype="f16").validate()


def test_patch_embed_sum_pools():
    pe = PatchEmbed(1, 1, dtype=np.float64)
    for conv in (pe.conv1, pe.conv2):
        conv.params["weight"][...] = 1.0
    y = pe(np.ones((1, 1, 4, 4)))
    assert y.shape == (1, 1, 1, 1) and y.item() == 16.0
    assert PatchEmbed(3, 8)(np.ones((2, 3, 32, 32), np.float32)).shape == (2, 8, 8, 8)
    with pytest.raises(ConfigurationError):
        pe(np.ones((1, 1, 6, 6)))


def test_downsample_average_pool():
    ds = Downsample(1, 1, norm=False, dtype=np.float64)
    ds.conv.params["weight"][...] = 0.25
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    expect = x.reshape(1, 1, 2, 2, 2, 2).mean(axis=(3, 5))
    np.testing.assert_allclose(ds(x), expect)
    full = Downsample(3, 5)
    assert sum(a.size for _, a in full.conv.named_parameters()) == 4 * 3 * 5 + 5
    assert sum(a.size for _, a in full.bn.named_parameters()) == 2 * 5


def test_head_pooling_and_count():
    head = Head(2, 3, dtype=np.float64)
    assert head_params(2, 3) == 8
    head.fc.params["weight"][...] = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    y = head(np.full((1, 2, 4, 4), 2.5))
    np.testing.assert_allclose(y[0, :2], [2.5, 2.5])
    one_hot = np.zeros((1, 2, 3, 3))
    one_hot[0, :, 1, 2] = 9.0
    head.fc.params["weight"][...] = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    np.testing.assert_allclose(head(one_hot)[0, :2], [1.0, 1.0])


def test_zero_input_gives_head_bias():
    model = build(desk()).eval()
    np.testing.assert_array_equal(model(np.zeros((2, 1, 32, 32), np.float32)), 0.0)
    model.head.fc.params["bias"][...] = np.arange(10)
    np.testing.assert_allclose(model(np.zeros((1, 1, 32, 32), np.float32))[0], np.arange(10))


def test_single_block_forward_is_composition():
    cfg = desk(stage_blocks=(1, 0, 0, 0), norms=False, dtype="f64")
    model = build(cfg)
    x = np.random.default_rng(0).standard_normal((2, 1, 32, 32))
    h = model.embed.conv2(model.embed.conv1(x))
    h = model.stages[0].blocks[0](h)
    for st in model.stages[1:]:
        h = st.down.conv(h)
    np.testing.assert_array_equal(model(x), model.head.fc(h.mean(axis=(2, 3))))


def test_f32_and_f64_agree():
    x = np.random.default_rng(0).standard_normal((4, 1, 32, 32))
    m32, m64 = build(desk(dtype="f32")).eval(), build(desk(dtype="f64")).eval()
    y32, y64 = m32(x.astype(np.float32)), m64(x)
    assert np.abs(y32 - y64).max() / np.abs(y64).max() <= 1e-4


def test_forward_rejects_wrong_shape():
    with pytest.raises(DimensionError):
        build(desk())(np.zeros((1, 1, 28, 28), np.float32))


def test_predict_rules():
    assert predict(np.array([0.1, 0.9, 0.3])) == 1
    assert predict(np.array([0.5, 0.5])) == 0
    logits = np.random.default_rng(0).standard_normal((20, 10))
    np.testing.assert_array_equal(predict(logits), predict(logits + 3.7))


@pytest.mark.parametrize("use_ln", [True, False])
def test_model_gradient_small(use_ln):
    # widths of 2 make layer norm a near sign function and batch norm over two
    # samples nearly singular, which swamps central differences; 4 is enough
    cfg = ModelConfig((1, 0, 0, 1), (4, 4, 4, 4), r_exp=2, use_ln=use_ln, img_channels=1, img_size=(32, 32),
                      classes=3, dtype="f64")
    assert grad_check(build(cfg), (4, 1, 32, 32), seed=0) <= 1e-6


def test_analytic_examples():
    assert embed_params(3, 64) == 17280 == 14 * 64 + 4 * 64 * 64
    assert aim_params(64, 3) == 65728
    assert head_params(192, 1000) == 192192
    cfg = ModelConfig((1, 0, 0, 0), (1, 1, 1, 1), img_channels=1, img_size=(32, 32), classes=10)
    assert count_flops_analytic(cfg)["macs"]["embed"] == 1280
    cfg = ModelConfig((1, 0, 0, 0), (64, 64, 64, 64), classes=10, img_size=(128, 128))
    assert count_flops_analytic(cfg)["macs"]["head"] == 16 * 64 + 640


def test_macs_scale_with_image_area():
    a = count_flops_analytic(desk(img_size=(32, 32)))
    b = count_flops_analytic(desk(img_size=(64, 64)))
    for k in ("embed", "blocks", "downsamplers"):
        assert b["macs"][k] == 4 * a["macs"][k]
    assert b["flops"]["total"] == 2 * b["macs"]["total"]


@pytest.mark.parametrize("blocks,hidden,r", [((2, 2, 4, 2), (16, 32, 32, 32), 3), ((1, 0, 2, 0), (8, 8, 12, 4), 2),
                                             ((3, 1, 1, 1), (4, 6, 8, 10), 4)])
def test_enumerated_matches_analytic(blocks, hidden, r):
    cfg = desk(stage_blocks=blocks, stage_hidden=hidden, r_exp=r)
    a, e = count_params_analytic(cfg), enumerate_params(build(cfg))
    for k in ("embed", "blocks", "downsamplers"):
        assert a[k] == e[k], k
    # a biased d -> m classifier holds d*m + m values; the closed form is d*(m+1)
    assert e["head"] == hidden[-1] * cfg.classes + cfg.classes
    assert a["head"] - e["head"] == hidden[-1] - cfg.classes


def test_folding_removes_norm_parameters():
    model = build(desk(use_ln=False))
    before = enumerate_params(model)
    model.fold_batchnorm()
    after = enumerate_params(model)
    assert after["total"] < before["total"]
    assert after["norm_stats"] == 0


def test_small_preset_total_is_reported():
    total = count_params_analytic(preset("small"))["total"]
    print(f"small preset analytic total = {total:,} (published figure 12.3M)")
    assert total > 0


def test_zero_biases_touches_every_bias():
    model = build(desk())
    for _, arr in model.named_parameters():
        arr[...] = 1.0
    zero_biases(model)
    for name, arr in model.named_parameters():
        if name.endswith("bias"):
            assert not np.any(arr), name
