from __future__ import annotations

import numpy as np
import pytest
import torch
from torch import nn

from lvquant.errors import ChannelUnderflow, ShapeMismatch, UnsupportedLayer
from lvquant.model import (
    BACKBONES,
    BackboneSpec,
    HeadSpec,
    LVNet,
    SRDecoder,
    attach_sr_decoder,
    build_2d,
    chance_threshold,
    inflate_kernel,
    inflate_to_3d,
    load_checkpoint,
    model_from_checkpoint,
    pretext_pretrain,
    save_checkpoint,
    split_outputs,
)

MINI = BACKBONES["mini"]


def test_head_shapes():
    m = build_2d(MINI, HeadSpec("regression"), seed=0).eval()
    out = m(torch.zeros(8, 3, 224, 224))
    assert out["regression"].shape == (8, 11) and out["phase_logits"] is None
    j = build_2d(MINI, HeadSpec("joint"), seed=0).eval()
    reg, probs = split_outputs(j(torch.randn(2, 3, 224, 224)))
    assert reg.shape == (2, 11)
    torch.testing.assert_close(probs.sum(-1), torch.ones(2))


def test_inflate_kernel_example():
    w = torch.tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
    k = inflate_kernel(w, 3)
    assert k.shape == (1, 1, 3, 2, 2)
    expected = torch.tensor([[1 / 3, 2 / 3], [1.0, 4 / 3]])
    for d in range(3):
        torch.testing.assert_close(k[0, 0, d], expected)
    assert torch.equal(k.to(torch.float64).sum(2), w.to(torch.float64))


def test_inflate_kernel_random_exact():
    g = torch.Generator().manual_seed(0)
    for d_c in (1, 3, 5, 7):
        w = torch.randn(16, 8, 3, 3, generator=g)
        assert torch.equal(inflate_kernel(w, d_c).to(torch.float64).sum(2), w.to(torch.float64))


def test_inflated_model_shapes():
    m3 = inflate_to_3d(build_2d(MINI, HeadSpec("joint"), seed=1)).eval()
    out = m3(torch.randn(2, 3, 5, 64, 64))
    assert out["regression"].shape == (2, 5, 11)
    assert out["phase_logits"].shape == (2, 5, 2)


def test_inflation_preserves_training_mode():
    m2 = build_2d(MINI, HeadSpec("regression"), seed=1).eval()
    assert not inflate_to_3d(m2).training
    assert inflate_to_3d(m2.train()).training


def test_unsupported_layer():
    m = build_2d(MINI, HeadSpec("regression"), seed=0)
    m.body.stem.append(nn.Dropout(0.1))
    with pytest.raises(UnsupportedLayer):
        inflate_to_3d(m)


def test_decoder_contract():
    m = build_2d(MINI, HeadSpec("regression"), sr=True, seed=0).eval()
    for side in (64, 96, 224):
        seg = m(torch.randn(1, 3, side, side), with_seg=True)["seg_logits"]
        assert seg.shape == (1, 3, side, side)
        torch.testing.assert_close(torch.softmax(seg, 1).sum(1), torch.ones(1, side, side), atol=1e-6, rtol=0)
    assert m(torch.randn(1, 3, 64, 64))["seg_logits"] is None  # decoder only on request in eval mode


def test_decoder_channel_sequence():
    assert SRDecoder(512).channel_sequence == [256, 128, 64, 32, 16]
    with pytest.raises(ChannelUnderflow):
        SRDecoder(64)


def test_decoder_3d_per_frame():
    m3 = inflate_to_3d(build_2d(MINI, HeadSpec("regression"), sr=True, seed=0)).eval()
    seg = m3(torch.randn(1, 3, 3, 64, 64), with_seg=True)["seg_logits"]
    assert seg.shape == (1, 3, 3, 64, 64)
    for mod in m3.decoder.modules():
        if isinstance(mod, nn.Conv3d):
            assert mod.kernel_size[0] == 1


def test_attach_decoder():
    m = attach_sr_decoder(build_2d(MINI, HeadSpec("regression"), seed=0))
    assert m.sr


def test_checkpoint_roundtrip(tmp_path):
    m = build_2d(MINI, HeadSpec("joint"), sr=True, seed=3).eval()
    save_checkpoint(tmp_path / "ck", m)
    r = model_from_checkpoint(tmp_path / "ck")
    for (k, a), (_, b) in zip(m.state_dict().items(), r.state_dict().items()):
        assert torch.equal(a, b), k
    raw = load_checkpoint(tmp_path / "ck")
    assert raw["meta"]["spec"]["arch_id"] == "mini"


def test_pretrained_body_copied_head_fresh():
    spec = BackboneSpec("tiny", 4, (4, 96), (1, 1), input_size=64)
    ck = pretext_pretrain(spec, n_train=64, n_val=32, epochs=1, seed=0)
    a = build_2d(spec, HeadSpec("regression"), "pretrained", ck, seed=11)
    r = build_2d(spec, HeadSpec("regression"), "random", seed=11)
    for k, v in a.body.state_dict().items():
        assert np.array_equal(v.numpy(), ck["tensors"][f"body.{k}"])
    assert any(not torch.equal(x, y) for x, y in zip(a.body.state_dict().values(), r.body.state_dict().values()))
    assert all(x.shape == y.shape for x, y in zip(a.state_dict().values(), r.state_dict().values()))
    other = BackboneSpec("tiny", 4, (8, 96), (1, 1), input_size=64)
    with pytest.raises(ShapeMismatch):
        build_2d(other, HeadSpec("regression"), "pretrained", ck)


def test_pretext_checkpoint_reload(tmp_path):
    spec = BackboneSpec("tiny", 4, (4, 96), (1, 1), input_size=64)
    ck = pretext_pretrain(spec, n_train=32, n_val=16, epochs=1, seed=1, out_dir=tmp_path / "pre")
    back = load_checkpoint(tmp_path / "pre")
    for k, v in ck["tensors"].items():
        assert back["tensors"][k].tobytes() == np.asarray(v, dtype="<f4").tobytes() or v.dtype.kind != "f"
    assert "val_accuracy" in back["meta"]["pretext"]


def test_chance_threshold():
    assert chance_threshold(10, 200) == pytest.approx(0.1 + 3 * np.sqrt(0.09 / 200))
