import colorsys
import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from claifo.augment import (
    COLOR_KINDS,
    OP_KINDS,
    AugmentPipeline,
    OpDraw,
    ParamDraw,
    apply,
    hsv_to_rgb,
    positive_pair,
    rgb_to_hsv,
    sample_params,
)


def draw(kind, **values):
    return ParamDraw(1, [OpDraw(kind, np.array([True]), {k: np.array([v]) for k, v in values.items()})])


def stack(seed=0, d=3, size=8):
    return np.random.default_rng(seed).random((d, size, size, 3)).astype(np.float32)


stacks = arrays(np.float32, (2, 6, 6, 3), elements=st.floats(0, 1, width=32))


def test_presets_cover_the_operation_table():
    assert len(OP_KINDS) == 10
    assert AugmentPipeline.from_preset("none").ops == []
    assert [o.kind for o in AugmentPipeline.from_preset("light").ops] == ["brightness"]
    assert [o.kind for o in AugmentPipeline.from_preset("color").ops] == list(COLOR_KINDS)
    assert [o.kind for o in AugmentPipeline.from_preset("full").ops] == list(OP_KINDS)
    with pytest.raises(ValueError):
        AugmentPipeline.from_preset("heavy")


def test_sample_params_sizes():
    rng = np.random.default_rng(0)
    assert len(sample_params(AugmentPipeline.from_preset("none"), rng)) == 0
    d = sample_params(AugmentPipeline.from_preset("light"), rng)
    assert len(d) == 1 and d.ops[0].kind == "brightness" and d.ops[0].values["factor"].shape == (1,)


def test_brightness_factor_mean():
    d = sample_params(AugmentPipeline.from_preset("light"), np.random.default_rng(0), n=10_000)
    f = d.ops[0].values["factor"]
    assert abs(f.mean() - 1.0) < 0.05
    assert f.min() >= 0.3 and f.max() <= 1.7


def test_brightness_and_invert_pixels():
    x = np.full((1, 2, 2, 3), 0.5, np.float32)
    np.testing.assert_allclose(apply(draw("brightness", factor=1.2), x), 0.6, rtol=1e-6)
    x = np.full((1, 2, 2, 3), 0.3, np.float32)
    np.testing.assert_allclose(apply(draw("invert"), x), 0.7, rtol=1e-6)


@pytest.mark.parametrize("kind", ["hflip", "vflip"])
def test_flip_is_involution(kind):
    x = stack()
    np.testing.assert_array_equal(apply(draw(kind), apply(draw(kind), x)), x)


def test_grayscale_idempotent():
    x = stack()
    g = apply(draw("grayscale"), x)
    np.testing.assert_allclose(apply(draw("grayscale"), g), g, atol=1e-6)


def test_resized_crop_shape_and_identity_at_full_scale():
    x = stack(size=12)
    y = apply(draw("resized_crop", scale=0.6, u=0.3, v=0.9), x)
    assert y.shape == x.shape
    same = apply(draw("resized_crop", scale=1.0, u=0.5, v=0.5), x)
    np.testing.assert_allclose(same, x, atol=1e-5)


def test_hsv_against_colorsys():
    px = np.random.default_rng(2).random((500, 3))
    ours = rgb_to_hsv(torch.from_numpy(px)).numpy()
    ref = np.array([colorsys.rgb_to_hsv(*p) for p in px])
    np.testing.assert_allclose(ours, ref, atol=1e-12)
    back = hsv_to_rgb(torch.from_numpy(ref)).numpy()
    np.testing.assert_allclose(back, px, atol=1e-12)


def test_hue_shift_matches_colorsys():
    x = stack(1, d=1, size=4).astype(np.float64)
    y = apply(draw("hue", shift=0.2), x)
    for p, q in zip(x.reshape(-1, 3), y.reshape(-1, 3)):
        h, s, v = colorsys.rgb_to_hsv(*p)
        np.testing.assert_allclose(q, colorsys.hsv_to_rgb((h + 0.2) % 1.0, s, v), atol=1e-9)


def test_blur_preserves_constant_image():
    x = np.full((2, 6, 6, 3), 0.4, np.float32)
    np.testing.assert_allclose(apply(draw("gaussian_blur", sigma=0.7), x), x, atol=1e-6)


def test_same_draw_applied_to_every_frame():
    frame = stack(d=1)[0]
    x = np.stack([frame] * 3)
    pipe = AugmentPipeline.from_preset("full", [{"kind": k, "apply_prob": 1.0} for k in OP_KINDS])
    y = apply(sample_params(pipe, np.random.default_rng(0)), x)
    np.testing.assert_array_equal(y[0], y[1])
    np.testing.assert_array_equal(y[1], y[2])


def test_apply_rejects_empty_stack_and_count_mismatch():
    with pytest.raises(ValueError):
        apply(draw("invert"), np.zeros((0, 4, 4, 3), np.float32))
    with pytest.raises(ValueError):
        apply(draw("invert"), np.zeros((2, 3, 4, 4, 3), np.float32))


def test_apply_torch_and_numpy_agree():
    x = stack()
    d = sample_params(AugmentPipeline.from_preset("full"), np.random.default_rng(5))
    np.testing.assert_array_equal(apply(d, x), apply(d, torch.from_numpy(x)).numpy())


@settings(max_examples=40, deadline=None)
@given(stacks, st.sampled_from(["light", "color", "full"]), st.integers(0, 2**31))
def test_range_and_determinism(x, preset, seed):
    pipe = AugmentPipeline.from_preset(preset)
    y1 = apply(sample_params(pipe, np.random.default_rng(seed)), x)
    y2 = apply(sample_params(pipe, np.random.default_rng(seed)), x)
    assert y1.shape == x.shape
    assert y1.min() >= 0.0 and y1.max() <= 1.0
    np.testing.assert_array_equal(y1, y2)


def test_positive_pair_none_returns_input():
    x = stack()
    vi, vj = positive_pair(AugmentPipeline.from_preset("none"), x, np.random.default_rng(0))
    assert vi is x and vj is x


def test_positive_pair_reproducible():
    x = stack()
    pipe = AugmentPipeline.from_preset("color")
    a = positive_pair(pipe, x, np.random.default_rng(9))
    b = positive_pair(pipe, x, np.random.default_rng(9))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_positive_pair_color_nondegenerate():
    x = stack(size=6)
    pipe = AugmentPipeline.from_preset("color")
    rng = np.random.default_rng(0)
    changed = 0
    for _ in range(1000):
        vi, _ = positive_pair(pipe, x, rng)
        changed += np.linalg.norm(vi - x) > 0
    assert changed / 1000 >= 0.99


def test_pipeline_json_roundtrip():
    pipe = AugmentPipeline.from_preset("color", [{"kind": "hue", "params": {"low": -0.1, "high": 0.1},
                                                  "apply_prob": 0.5}])
    d = json.loads(json.dumps(pipe.to_dict()))
    assert d["preset"] == "color" and d["overrides"][0]["kind"] == "hue"
    assert AugmentPipeline.from_dict(d) == pipe
    assert AugmentPipeline.from_preset("full").to_dict() == {"preset": "full", "overrides": []}
