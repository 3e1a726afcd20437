"""Pyramid backbone with parallel single-stage heads, plus checkpoint I/O.

Checkpoint format (``.ckpt``): a zip archive with fixed timestamps holding

* ``meta.json`` -- ``{"format": "cdcl-checkpoint", "version": 1,
  "config": <ModelConfig dict>, "extended": bool, ...}``
* ``params/<name>.npy`` -- one array per entry of the model state dict.

Loading refuses archives whose skeleton or taxonomy differs from the
caller's expectation.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .skeleton import PartTaxonomy, SkeletonSpec, get_skeleton, get_taxonomy

CHECKPOINT_FORMAT = "cdcl-checkpoint"
CHECKPOINT_VERSION = 1
HEAD_LAYERS = 8

# (channels per stage, blocks per stage); every stage halves resolution
_PRESETS = {
    "tiny": ((16, 32, 48, 64), (1, 1, 1, 1)),
    "small": ((24, 48, 64, 96), (2, 2, 2, 2)),
}


@dataclass
class ModelConfig:
    backbone_depth: str = "tiny"
    feature_channels: int = 32
    head_channels: int = 32
    output_stride: int = 8
    spec: str = "coco17"
    taxonomy: str = "parts14"
    extra_spec: Optional[str] = None
    backbone_weights: Optional[str] = None
    seed: int = 0

    def __post_init__(self):
        s = int(self.output_stride)
        if s < 1 or s & (s - 1):
            raise ValueError(f"output_stride must be a power of two, got {s}")
        if self.feature_channels < 8:
            raise ValueError("feature_channels must be >= 8")
        if self.backbone_depth not in ("tiny", "small", "paper"):
            raise ValueError(f"unknown backbone_depth {self.backbone_depth!r}")
        get_skeleton(self.spec)
        get_taxonomy(self.taxonomy)

    @property
    def skeleton(self) -> SkeletonSpec:
        return get_skeleton(self.spec)

    @property
    def part_taxonomy(self) -> PartTaxonomy:
        return get_taxonomy(self.taxonomy)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelOutput:
    K_hat: torch.Tensor
    P_hat: torch.Tensor
    B_hat: torch.Tensor
    K2_hat: Optional[torch.Tensor] = None
    P2_hat: Optional[torch.Tensor] = None

    def select(self, idx) -> "ModelOutput":
        pick = lambda t: None if t is None else t[idx]
        return ModelOutput(pick(self.K_hat), pick(self.P_hat), pick(self.B_hat), pick(self.K2_hat), pick(self.P2_hat))

    def numpy(self) -> "ModelOutput":
        conv = lambda t: None if t is None else t.detach().cpu().numpy()
        return ModelOutput(conv(self.K_hat), conv(self.P_hat), conv(self.B_hat), conv(self.K2_hat), conv(self.P2_hat))


class ResBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1)
        self.skip = nn.Conv2d(cin, cout, 1, stride) if (stride != 1 or cin != cout) else nn.Identity()

    def forward(self, x):
        return F.relu(self.conv2(F.relu(self.conv1(x))) + self.skip(x))


class Backbone(nn.Module):
    """Plain residual trunk returning one feature map per stage."""

    def __init__(self, depth: str):
        super().__init__()
        widths, blocks = _PRESETS[depth]
        stages, cin = [], 3
        for w, n in zip(widths, blocks):
            layers = [ResBlock(cin, w, 2)] + [ResBlock(w, w, 1) for _ in range(n - 1)]
            stages.append(nn.Sequential(*layers))
            cin = w
        self.stages = nn.ModuleList(stages)
        self.out_channels = list(widths)

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class ResNet101Backbone(nn.Module):
    def __init__(self):
        super().__init__()
        from torchvision.models import resnet101

        net = resnet101(weights=None)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu)
        self.pool = net.maxpool
        self.stages = nn.ModuleList([net.layer1, net.layer2, net.layer3, net.layer4])
        self.out_channels = [64, 256, 512, 1024, 2048]

    def forward(self, x):
        c1 = self.stem(x)
        feats = [c1]
        x = self.pool(c1)
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def _head(cin: int, width: int, cout: int) -> nn.Sequential:
    layers: list[nn.Module] = [nn.Conv2d(cin, width, 3, 1, 1), nn.ReLU()]
    for _ in range(HEAD_LAYERS - 2):
        layers += [nn.Conv2d(width, width, 3, 1, 1), nn.ReLU()]
    layers.append(nn.Conv2d(width, cout, 3, 1, 1))
    return nn.Sequential(*layers)


def resample(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    if x.shape[-2] >= size[0] and x.shape[-1] >= size[1]:
        return F.adaptive_avg_pool2d(x, size)
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class CDCLNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = replace(config)
        spec, tax = config.skeleton, config.part_taxonomy
        self.backbone = ResNet101Backbone() if config.backbone_depth == "paper" else Backbone(config.backbone_depth)
        f = config.feature_channels
        self.lateral = nn.ModuleList([nn.Conv2d(c, f, 1) for c in self.backbone.out_channels])
        self.fuse = nn.Conv2d(f * len(self.lateral), f, 1)
        self.heads = nn.ModuleDict({
            "keypoints": _head(f, config.head_channels, spec.num_keypoints),
            "paf": _head(f, config.head_channels, 2 * spec.num_limbs),
            "parts": _head(f, config.head_channels, tax.num_classes),
        })

    @property
    def stride(self) -> int:
        return self.config.output_stride

    @property
    def extended(self) -> bool:
        return "keypoints2" in self.heads

    def features(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        size = (-(-h // self.stride), -(-w // self.stride))
        pyramid = [resample(lat(c), size) for lat, c in zip(self.lateral, self.backbone(x))]
        return F.relu(self.fuse(torch.cat(pyramid, dim=1)))

    def forward(self, x: torch.Tensor) -> ModelOutput:
        feat = self.features(x)
        out = ModelOutput(self.heads["keypoints"](feat), self.heads["paf"](feat), self.heads["parts"](feat))
        if self.extended:
            out.K2_hat = self.heads["keypoints2"](feat)
            out.P2_hat = self.heads["paf2"](feat)
        return out


def build_model(config: ModelConfig) -> CDCLNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = CDCLNet(config)
    if config.backbone_weights:
        _load_backbone(model, config.backbone_weights)
    if config.extra_spec:
        extend_heads(model, get_skeleton(config.extra_spec))
    return model


def extend_heads(model: CDCLNet, novel: SkeletonSpec) -> CDCLNet:
    """Attach keypoint and PAF heads for a second skeleton, sharing the trunk."""
    if model.extended:
        raise ValueError("model already carries extended heads")
    cfg = model.config
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed + 7919)
        model.heads["keypoints2"] = _head(cfg.feature_channels, cfg.head_channels, novel.num_keypoints)
        model.heads["paf2"] = _head(cfg.feature_channels, cfg.head_channels, 2 * novel.num_limbs)
    cfg.extra_spec = novel.name
    return model


def image_tensor(image: np.ndarray) -> torch.Tensor:
    """uint8 ``[H, W, 3]`` (or a batch of them) to float ``[N, 3, H, W]`` in [-0.5, 0.5]."""
    image = np.asarray(image)
    if image.ndim == 3:
        image = image[None]
    if image.ndim != 4 or image.shape[-1] != 3:
        raise ValueError(f"expected RGB image(s) [H, W, 3], got shape {image.shape}")
    if image.shape[1] == 0 or image.shape[2] == 0:
        raise ValueError("zero-sized image")
    x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32) / 255.0 - 0.5)
    return x.permute(0, 3, 1, 2).contiguous()


def forward(model: CDCLNet, image: np.ndarray) -> ModelOutput:
    """Evaluation-mode forward pass of one RGB image; returns numpy maps."""
    image = np.asarray(image)
    x = image_tensor(image)
    if min(x.shape[-2:]) < model.stride:
        raise ValueError(f"image {tuple(x.shape[-2:])} smaller than output stride {model.stride}")
    model.eval()
    with torch.no_grad():
        out = model(x)
    return out.select(0).numpy()


# -- checkpoints -----------------------------------------------------------

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _write_member(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(model: CDCLNet, path: str, extra: Optional[dict] = None) -> None:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "extended": model.extended,
        "skeleton": model.config.skeleton.to_dict(),
        "taxonomy": model.config.part_taxonomy.to_dict(),
    }
    if extra:
        meta["extra"] = extra
    with zipfile.ZipFile(path, "w") as zf:
        _write_member(zf, "meta.json", json.dumps(meta, indent=2, sort_keys=True).encode())
        for name, t in model.state_dict().items():
            buf = io.BytesIO()
            np.save(buf, t.detach().cpu().numpy(), allow_pickle=False)
            _write_member(zf, f"params/{name}.npy", buf.getvalue())


def read_checkpoint(path: str) -> tuple[dict, dict]:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a cdcl checkpoint")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        params = {}
        for name in zf.namelist():
            if name.startswith("params/") and name.endswith(".npy"):
                params[name[len("params/"):-len(".npy")]] = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
    return meta, params


def load_checkpoint(path: str, spec: Optional[SkeletonSpec] = None,
                    taxonomy: Optional[PartTaxonomy] = None) -> CDCLNet:
    meta, params = read_checkpoint(path)
    if spec is not None and meta["skeleton"] != spec.to_dict():
        raise ValueError(f"{path}: checkpoint skeleton {meta['skeleton']['name']!r} does not match {spec.name!r}")
    if taxonomy is not None and meta["taxonomy"] != taxonomy.to_dict():
        raise ValueError(f"{path}: checkpoint taxonomy {meta['taxonomy']['name']!r} does not match {taxonomy.name!r}")
    cfg = dict(meta["config"])
    cfg["backbone_weights"] = None
    model = build_model(ModelConfig(**cfg))
    state = {k: torch.from_numpy(v) for k, v in params.items()}
    model.load_state_dict(state, strict=True)
    return model


def _load_backbone(model: CDCLNet, path: str) -> None:
    import os

    if not os.path.exists(path):
        raise FileNotFoundError(f"backbone weight file not found: {path}")
    _, params = read_checkpoint(path)
    state = {k[len("backbone."):]: torch.from_numpy(v) for k, v in params.items() if k.startswith("backbone.")}
    if not state:
        raise ValueError(f"{path}: no backbone parameters in checkpoint")
    model.backbone.load_state_dict(state, strict=True)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
