"""Networks: the cascade feature extractor and the multi-task U-Net detector.

Both share a VGG-style encoder whose five blocks run at strides 1, 2, 4, 8
and 16, followed by a final max-pool to stride 32.

The cascade extractor wires the decoder as follows: the stride-32 encoder
output feeds level 5; each decoder block upsamples the previous level by 2,
concatenates the encoder block at that stride and emits the next level, down
to level 1 at stride 2. Every level passes through its own ASPP block and a
1x1 convolution projecting to ``embed_dim`` channels.
"""
from __future__ import annotations

import logging
import math
import os
import tempfile
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import EncoderConfig, ExtractorConfig
from .geometry import NUM_LEVELS, downsample_coord

logger = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
HEAT_PRIOR = 0.01


def get_device() -> torch.device:
    """Compute device from ``CC2D_DEVICE`` (default: cpu)."""
    return torch.device(os.environ.get("CC2D_DEVICE", "cpu"))


def conv_block(in_ch: int, out_ch: int, n: int, batch_norm: bool = True) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(n):
        layers.append(nn.Conv2d(in_ch if i == 0 else out_ch, out_ch, 3, padding=1))
        if batch_norm:
            layers.append(nn.BatchNorm2d(out_ch))
        layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


class VGGEncoder(nn.Module):
    """Returns the five pre-pool block outputs and the stride-32 bottom."""

    def __init__(self, cfg: EncoderConfig, in_channels: int = 3):
        super().__init__()
        self.cfg = cfg
        blocks = []
        c = in_channels
        for out_ch, n in zip(cfg.channels, cfg.convs):
            blocks.append(conv_block(c, out_ch, n, cfg.batch_norm))
            c = out_ch
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x):
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
            x = F.max_pool2d(x, 2)
        return feats, x

    def load_pretrained(self) -> bool:
        """Copy ImageNet VGG19 weights into a full-width encoder. Returns success."""
        if not self.cfg.is_vgg19:
            logger.warning("pretrained weights need the full VGG19 layout; using random init")
            return False
        try:
            from torchvision.models import VGG19_BN_Weights, VGG19_Weights, vgg19, vgg19_bn
            ref = (vgg19_bn(weights=VGG19_BN_Weights.IMAGENET1K_V1) if self.cfg.batch_norm
                   else vgg19(weights=VGG19_Weights.IMAGENET1K_V1))
        except Exception as exc:  # offline or missing weights
            logger.warning("could not load pretrained VGG19 weights (%s); using random init", exc)
            return False
        src = [m for m in ref.features if isinstance(m, (nn.Conv2d, nn.BatchNorm2d))]
        dst = [m for m in self.blocks.modules() if isinstance(m, (nn.Conv2d, nn.BatchNorm2d))]
        for s, d in zip(src, dst):
            d.load_state_dict(s.state_dict())
        return True


class ASPP(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, dilations=(1, 6, 12, 18)):
        super().__init__()
        branches = []
        for d in dilations:
            k = 1 if d == 1 else 3
            branches.append(nn.Sequential(
                nn.Conv2d(in_ch, out_ch, k, padding=0 if k == 1 else d, dilation=d, bias=False),
                nn.BatchNorm2d(out_ch),
                nn.ReLU(inplace=True),
            ))
        self.branches = nn.ModuleList(branches)
        # image-level branch has no norm: its spatial extent is 1x1
        self.pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(in_ch, out_ch, 1), nn.ReLU(inplace=True))
        self.project = nn.Sequential(
            nn.Conv2d(out_ch * (len(dilations) + 1), out_ch, 1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        outs = [b(x) for b in self.branches]
        outs.append(self.pool(x).expand(-1, -1, x.shape[2], x.shape[3]))
        return self.project(torch.cat(outs, dim=1))


class DecoderBlock(nn.Module):
    def __init__(self, in_ch: int, skip_ch: int, out_ch: int, batch_norm: bool = True):
        super().__init__()
        self.conv = conv_block(in_ch + skip_ch, out_ch, 2, batch_norm)

    def forward(self, x, skip):
        x = F.interpolate(x, size=skip.shape[2:], mode="bilinear", align_corners=False)
        return self.conv(torch.cat([x, skip], dim=1))


def _init_normal(modules, std=0.02):
    for m in modules:
        if isinstance(m, nn.Conv2d):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class InputNorm(nn.Module):
    """[0, 1] grayscale (B, H, W) or (B, 1, H, W) -> ImageNet-normalized 3 channels."""

    def __init__(self):
        super().__init__()
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1), persistent=False)

    def forward(self, x):
        if x.dim() == 3:
            x = x.unsqueeze(1)
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        return (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)


class CascadeExtractor(nn.Module):
    """Maps an image to 5 embedding maps; level ``i`` has stride ``2**i``."""

    def __init__(self, cfg: ExtractorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        enc = cfg.encoder
        self.norm = InputNorm()
        self.encoder = VGGEncoder(enc)
        ch = enc.channels
        # decoders[j] produces level 4 - j from the level above and encoder block 4 - j
        self.decoders = nn.ModuleList()
        prev = ch[4]
        for lvl in range(4, 0, -1):
            self.decoders.append(DecoderBlock(prev, ch[lvl], ch[lvl], enc.batch_norm))
            prev = ch[lvl]
        level_ch = {5: ch[4], 4: ch[4], 3: ch[3], 2: ch[2], 1: ch[1]}
        self.heads = nn.ModuleDict({
            str(lvl): nn.Sequential(ASPP(level_ch[lvl], cfg.aspp_channels, cfg.aspp_dilations),
                                    nn.Conv2d(cfg.aspp_channels, cfg.embed_dim, 1))
            for lvl in range(1, NUM_LEVELS + 1)
        })
        _init_normal(self.decoders.modules())
        _init_normal(self.heads.modules())
        if enc.pretrained:
            self.encoder.load_pretrained()

    def forward(self, x) -> dict[int, torch.Tensor]:
        side_h, side_w = x.shape[-2:]
        if side_h % 32 or side_w % 32:
            raise ValueError(f"input side must be divisible by 32, got {side_h}x{side_w}")
        feats, x = self.encoder(self.norm(x))
        out = {5: self.heads["5"](x)}
        for j, dec in enumerate(self.decoders):
            lvl = 4 - j
            x = dec(x, feats[lvl])
            out[lvl] = self.heads[str(lvl)](x)
        return out


class SSLModel(nn.Module):
    """The query extractor and the patch extractor (one module when shared)."""

    def __init__(self, cfg: ExtractorConfig):
        super().__init__()
        self.cfg = cfg
        self.query_extractor = CascadeExtractor(cfg)
        self.patch_extractor = self.query_extractor if cfg.shared_weights else CascadeExtractor(cfg)

    def embed_query(self, x):
        return self.query_extractor(x)

    def embed_patch(self, x):
        return self.patch_extractor(x)


def extract(model: CascadeExtractor, images: torch.Tensor) -> dict[int, torch.Tensor]:
    """Cascade embeddings for a batch of [0, 1] images (B, H, W) or (B, C, H, W)."""
    h, w = images.shape[-2:]
    if h % 32 or w % 32:
        raise ValueError(f"input side must be divisible by 32, got {h}x{w}")
    return model(images)


def extract_anchor(emb: dict[int, torch.Tensor], p, levels=range(1, NUM_LEVELS + 1)) -> dict[int, torch.Tensor]:
    """Feature vector at the grid cell containing ``p`` on every level.

    ``emb`` maps level -> (C, h, w) for a single image; ``p`` is (x, y) in
    level-0 pixels.
    """
    out = {}
    for lvl in levels:
        fmap = emb[lvl]
        h, w = fmap.shape[-2:]
        if not (0 <= p[0] < w * 2 ** lvl and 0 <= p[1] < h * 2 ** lvl):
            raise IndexError(f"point {p} outside the level-0 frame of a {w * 2 ** lvl}x{h * 2 ** lvl} input")
        gx, gy = downsample_coord(p, lvl)
        out[lvl] = fmap[:, gy, gx]
    return out


class MultiTaskUNet(nn.Module):
    """U-Net emitting per-landmark heatmap logits and x/y offset maps at input resolution."""

    def __init__(self, cfg: EncoderConfig, num_landmarks: int):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.num_landmarks = num_landmarks
        self.norm = InputNorm()
        self.encoder = VGGEncoder(cfg)
        ch = cfg.channels
        self.decoders = nn.ModuleList()
        prev = ch[4]
        for lvl in range(4, -1, -1):
            self.decoders.append(DecoderBlock(prev, ch[lvl], ch[lvl], cfg.batch_norm))
            prev = ch[lvl]
        self.head = nn.Conv2d(ch[0], 3 * num_landmarks, 1)
        _init_normal(self.decoders.modules())
        _init_normal([self.head])
        # start the heat channels at a small foreground prior instead of p = 0.5
        with torch.no_grad():
            self.head.bias[:num_landmarks].fill_(math.log(HEAT_PRIOR / (1 - HEAT_PRIOR)))
        if cfg.pretrained:
            self.encoder.load_pretrained()

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"input side must be divisible by 32, got {h}x{w}")
        feats, x = self.encoder(self.norm(x))
        for j, dec in enumerate(self.decoders):
            x = dec(x, feats[4 - j])
        out = self.head(x)
        k = self.num_landmarks
        return out[:, :k], out[:, k:2 * k], out[:, 2 * k:]


# ------------------------------------------------------------------ checkpoints

class CheckpointError(Exception):
    pass


def save_checkpoint(path: Path, kind: str, config: dict, model: nn.Module, epoch: int,
                    optimizer: torch.optim.Optimizer | None = None, **extra) -> None:
    """Write ``{kind, config, parameters, epoch, optimizer}`` atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "kind": kind,
        "config": config,
        "parameters": model.state_dict(),
        "epoch": epoch,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        **extra,
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: Path, kind: str, expected_config: dict | None = None) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {ckpt.get('kind')!r}")
    if expected_config is not None and ckpt["config"] != expected_config:
        diff = sorted(k for k in set(ckpt["config"]) | set(expected_config)
                      if ckpt["config"].get(k) != expected_config.get(k))
        raise CheckpointError(f"{path}: checkpoint config differs from the run config in {diff}")
    return ckpt
