import numpy as np
import pytest
import torch

from cc2d.config import EncoderConfig, ExtractorConfig
from cc2d.models import (CascadeExtractor, CheckpointError, MultiTaskUNet, SSLModel, extract, extract_anchor,
                         load_checkpoint, save_checkpoint)
from cc2d.ssl import cosine_similarity_map


def tiny_cfg(embed_dim=4, shared=False, batch_norm=True):
    enc = EncoderConfig(channels=[4, 4, 8, 8, 8], convs=[1, 1, 1, 1, 1], batch_norm=batch_norm, pretrained=False)
    return ExtractorConfig(embed_dim=embed_dim, encoder=enc, aspp_dilations=[1, 2], aspp_channels=4,
                           shared_weights=shared)


@pytest.mark.parametrize("side", [64, 96, 192])
def test_level_shapes(side):
    net = CascadeExtractor(tiny_cfg()).eval()
    with torch.no_grad():
        out = extract(net, torch.rand(2, side, side))
    assert sorted(out) == [1, 2, 3, 4, 5]
    for lvl, t in out.items():
        assert tuple(t.shape) == (2, 4, side // 2 ** lvl, side // 2 ** lvl)


def test_indivisible_side_rejected():
    with pytest.raises(ValueError):
        extract(CascadeExtractor(tiny_cfg()), torch.rand(1, 48, 40))


def test_shared_weights():
    shared = SSLModel(tiny_cfg(shared=True)).eval()
    x = torch.rand(1, 64, 64)
    with torch.no_grad():
        a, b = shared.embed_query(x), shared.embed_patch(x)
    assert all(torch.equal(a[k], b[k]) for k in a)
    separate = SSLModel(tiny_cfg())
    assert separate.query_extractor is not separate.patch_extractor
    ids = {id(p) for p in separate.query_extractor.parameters()}
    assert not ids & {id(p) for p in separate.patch_extractor.parameters()}


def test_extract_anchor_indexing():
    emb = {lvl: torch.randn(3, 128 // 2 ** lvl, 128 // 2 ** lvl) for lvl in range(1, 6)}
    a = extract_anchor(emb, (0, 0))
    assert all(torch.equal(a[lvl], emb[lvl][:, 0, 0]) for lvl in a)
    a = extract_anchor(emb, (100, 60))
    assert torch.equal(a[5], emb[5][:, 1, 3])
    with pytest.raises(IndexError):
        extract_anchor(emb, (128, 0))


def test_encoder_gradient_finite_differences():
    torch.manual_seed(0)
    net = CascadeExtractor(tiny_cfg(batch_norm=False)).double().eval()
    x = torch.rand(1, 32, 32, dtype=torch.float64)

    def f():
        emb = net(x)
        anchor = emb[3][0, :, 1, 2]
        return cosine_similarity_map(anchor, emb[2][0]).sum()

    params = [p for p in net.parameters() if p.requires_grad]
    net.zero_grad()
    f().backward()
    h = 1e-6
    rng = np.random.default_rng(0)
    for p in params[::3]:
        flat = p.data.view(-1)
        for j in rng.choice(flat.numel(), size=min(3, flat.numel()), replace=False):
            old = flat[j].item()
            flat[j] = old + h
            with torch.no_grad():
                up = f().item()
            flat[j] = old - h
            with torch.no_grad():
                down = f().item()
            flat[j] = old
            num = (up - down) / (2 * h)
            ana = 0.0 if p.grad is None else p.grad.view(-1)[j].item()
            assert abs(ana - num) <= 1e-2 * max(abs(num), abs(ana), 1e-6)


def test_unet_output_shapes():
    net = MultiTaskUNet(tiny_cfg().encoder, 3).eval()
    with torch.no_grad():
        h, ox, oy = net(torch.rand(2, 64, 64))
    assert h.shape == ox.shape == oy.shape == (2, 3, 64, 64)
    # heat logits start near the foreground prior, offsets near zero
    assert torch.sigmoid(h).mean().item() == pytest.approx(0.01, abs=0.005)


def test_checkpoint_round_trip_and_config_check(tmp_path):
    net = CascadeExtractor(tiny_cfg())
    path = tmp_path / "c.pt"
    save_checkpoint(path, "ssl", {"a": 1}, net, 3, torch.optim.Adam(net.parameters()))
    ck = load_checkpoint(path, "ssl", {"a": 1})
    assert ck["epoch"] == 3
    with pytest.raises(CheckpointError):
        load_checkpoint(path, "ssl", {"a": 2})
    with pytest.raises(CheckpointError):
        load_checkpoint(path, "tpl")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.pt", "ssl")
