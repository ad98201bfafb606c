import numpy as np
import pytest
import torch

from age_kit.errors import ConfigError
from age_kit.vit import (ViTConfig, VisionTransformer, attention_to_maps, gradient_check, load_backbone,
                         patchify, save_backbone, to_tensor)

TINY = ViTConfig(image_size=16, patch_size=4, embed_dim=12, depth=2, num_heads=3, mlp_ratio=2.0)


def tiny_model(dtype=torch.float32, seed=0):
    torch.manual_seed(seed)
    return VisionTransformer(TINY).to(dtype)


def batch(n=3, size=16, seed=0, dtype=torch.float32):
    return to_tensor(np.random.default_rng(seed).random((n, size, size)), dtype)


@pytest.mark.parametrize("kwargs", [dict(image_size=100), dict(embed_dim=64), dict(num_register_tokens=4)])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        ViTConfig(**kwargs)


def test_token_count():
    assert ViTConfig().num_tokens == 197
    assert ViTConfig().grid_size == 14


def test_patchify_row_major():
    img = np.arange(16.0).reshape(4, 4)
    p = patchify(img, 2)
    assert p.shape == (4, 4)
    np.testing.assert_array_equal(p[1], [2, 3, 6, 7])
    np.testing.assert_array_equal(patchify(torch.tensor(img), 2).numpy(), p)


def test_forward_shapes_and_attention_rows():
    model = tiny_model().eval()
    cls, attn = model.forward_features(batch(), capture_attention=True)
    assert cls.shape == (3, 12)
    assert attn.shape == (3, 3, 17, 17)
    torch.testing.assert_close(attn.sum(-1), torch.ones(3, 3, 17))
    maps = attention_to_maps(attn, TINY)
    assert len(maps) == 3 and maps[0].maps.shape == (3, 4, 4) and maps[0].layer == 1
    np.testing.assert_allclose(maps[0].maps.sum((1, 2)) + maps[0].cls_self_attention, 1.0, atol=1e-6)


def test_batch_consistency():
    model = tiny_model().eval()
    x = batch(4)
    with torch.no_grad():
        full = model(x)
        single = torch.cat([model(x[i:i + 1]) for i in range(4)])
    torch.testing.assert_close(full, single, atol=1e-5, rtol=1e-5)


def test_size_mismatch_and_resize():
    model = tiny_model().eval()
    with pytest.raises(ValueError):
        model(batch(size=8))
    with torch.no_grad():
        out = model(batch(size=8), allow_resize=True)
    assert out.shape == (3, 12)


def test_non_finite_parameters_detected():
    model = tiny_model()
    with torch.no_grad():
        model.cls_token[0, 0, 0] = float("nan")
    with pytest.raises(FloatingPointError):
        model(batch())


def test_gradient_check_float64():
    model = tiny_model(torch.float64)
    x = batch(2, dtype=torch.float64)
    target = torch.randn(2, 12, dtype=torch.float64, generator=torch.Generator().manual_seed(1))

    def loss(m):
        return ((m(x) - target) ** 2).mean()

    assert gradient_check(model, loss, num_params=60) < 1e-4


def test_gradient_check_linear_probe_exact():
    # a loss linear in every parameter has no truncation error in central differences
    model = tiny_model(torch.float64)
    weights = [torch.randn(p.shape, dtype=torch.float64, generator=torch.Generator().manual_seed(i))
               for i, p in enumerate(model.parameters())]

    def probe(m):
        return sum((w * p).sum() for w, p in zip(weights, m.parameters()))

    assert gradient_check(model, probe, num_params=80) < 1e-7


def test_gradient_check_detects_wrong_gradient():
    class Broken(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.w = torch.nn.Parameter(torch.tensor([1.5, -0.7], dtype=torch.float64))

        def forward(self):
            return _Twice.apply(self.w).sum()

    class _Twice(torch.autograd.Function):
        @staticmethod
        def forward(ctx, w):
            ctx.save_for_backward(w)
            return w ** 2

        @staticmethod
        def backward(ctx, g):
            (w,) = ctx.saved_tensors
            return g * 3 * w  # should be 2 * w

    assert gradient_check(Broken(), lambda m: m(), num_params=2) > 0.1


def test_checkpoint_roundtrip(tmp_path):
    model = tiny_model().eval()
    save_backbone(tmp_path / "b.safetensors", model, extra_metadata={"note": "x"})
    back, tensors, meta = load_backbone(tmp_path / "b.safetensors")
    assert back.config == TINY and meta["note"] == "x"
    with torch.no_grad():
        torch.testing.assert_close(model(batch()), back(batch()), rtol=0, atol=0)


def test_checkpoint_rejects_foreign_file(tmp_path):
    from safetensors.torch import save_file

    save_file({"x": torch.zeros(1)}, str(tmp_path / "f.safetensors"))
    with pytest.raises(ValueError):
        load_backbone(tmp_path / "f.safetensors")
