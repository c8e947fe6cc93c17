"""Network family: shared CSP backbone with keypoint, descriptor and object
detection heads, buildable at four scales (n/s/m/l).

Backbone stage layout (base channels before width scaling, stride after):
    stem   Conv k6 s2          64   /2
    stage1 Conv s2 + C3(d1)   128   /4
    stage2 Conv s2 + C3(d2)   256   /8
    stage3 Conv s2 + C3(d3)   512   /16
    stage4 Conv s2 + C3(d1) + SPPF  1024  /32
Base depths (d1, d2, d3) = (3, 6, 9), scaled by depth_multiple.

Per-scale channel table (after width scaling):
    n (w=0.25): 16 /  32 /  64 / 128 /  256, descriptor 64
    s (w=0.50): 32 /  64 / 128 / 256 /  512, descriptor 128
    m (w=0.75): 48 /  96 / 192 / 384 /  768, descriptor 196
    l (w=1.00): 64 / 128 / 256 / 512 / 1024, descriptor 256

The keypoint head works on the /8 feature map and outputs 65 channels per
cell (64 in-cell positions + 1 dustbin, dustbin at channel index 64). The
descriptor head enlarges the /8 map with nearest-neighbor interpolation,
concatenates the /4 backbone stage for extra detail, and convolves back down
to a unit-norm /8 descriptor grid. The object head runs a PAN neck over the
/8, /16, /32 maps with three anchor scales.
"""

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointError, ShapeError, ValidationError

CELL_SIZE = 8
DUSTBIN_CHANNEL = 64  # last of the 65 detector channels
CHECKPOINT_VERSION = 1

# (width_multiple, depth_multiple, descriptor_dim) per scale
SCALE_PRESETS = {
    "n": (0.25, 0.33, 64),
    "s": (0.50, 0.33, 128),
    "m": (0.75, 0.67, 196),
    "l": (1.00, 1.00, 256),
}

# box priors (w, h) in pixels per detection scale: /8, /16, /32
DEFAULT_ANCHORS = (
    ((10, 13), (16, 30), (33, 23)),
    ((30, 61), (62, 45), (59, 119)),
    ((116, 90), (156, 198), (373, 326)),
)

_BASE_CHANNELS = (64, 128, 256, 512, 1024)
_BASE_DEPTHS = (3, 6, 9, 3)


@dataclass
class ModelConfig:
    scale: str = "n"
    width_multiple: float = None
    depth_multiple: float = None
    descriptor_dim: int = None
    num_classes: int = 8
    input_channels: int = 3
    cell_size: int = CELL_SIZE
    anchor_spec: tuple = DEFAULT_ANCHORS

    def __post_init__(self):
        if self.scale not in SCALE_PRESETS:
            raise ValidationError(f"unknown model scale {self.scale!r}, want one of n/s/m/l")
        w, d, desc = SCALE_PRESETS[self.scale]
        if self.width_multiple is None:
            self.width_multiple = w
        if self.depth_multiple is None:
            self.depth_multiple = d
        if self.descriptor_dim is None:
            self.descriptor_dim = desc
        self.validate()

    def validate(self):
        if self.width_multiple <= 0 or self.depth_multiple <= 0:
            raise ValidationError("width/depth multiples must be strictly positive")
        if self.descriptor_dim not in (64, 128, 196, 256):
            raise ValidationError(f"descriptor_dim must be one of 64/128/196/256, got {self.descriptor_dim}")
        if self.num_classes < 1:
            raise ValidationError("num_classes must be >= 1")
        if self.input_channels != 3:
            raise ValidationError("only 3-channel RGB input is supported")
        if self.cell_size != CELL_SIZE:
            raise ValidationError(f"cell_size is fixed at {CELL_SIZE}")
        if len(self.anchor_spec) != 3:
            raise ValidationError("anchor_spec must list priors for 3 detection scales")

    def channels(self):
        """Scaled channel count per backbone stage (stem..stage4)."""
        return tuple(_make_divisible(c * self.width_multiple, 8) for c in _BASE_CHANNELS)

    def depths(self):
        return tuple(max(round(d * self.depth_multiple), 1) for d in _BASE_DEPTHS)


def _make_divisible(x, divisor):
    return max(int(math.ceil(x / divisor) * divisor), divisor)


@dataclass
class RawModelOutput:
    """Raw forward-pass products, all torch tensors.

    detector_logits: (B, 65, H/8, W/8)
    coarse_descriptors: (B, D, H/8, W/8), unit-norm along channel dim
    object_raw: per detection scale, (B, anchors, Hs, Ws, 5 + num_classes)
    """
    detector_logits: torch.Tensor
    coarse_descriptors: torch.Tensor
    object_raw: list

    def numpy(self):
        det = self.detector_logits.detach().cpu().numpy()
        desc = self.coarse_descriptors.detach().cpu().numpy()
        obj = [t.detach().cpu().numpy() for t in self.object_raw]
        return RawModelOutput(det, desc, obj)


class Conv(nn.Module):
    """Convolution + batch norm + SiLU."""

    def __init__(self, c_in, c_out, k=1, s=1):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, k, s, (k - 1) // 2, bias=False)
        self.bn = nn.BatchNorm2d(c_out)
        self.act = nn.SiLU(inplace=True)

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


class Bottleneck(nn.Module):
    def __init__(self, c_in, c_out, shortcut=True, expansion=0.5):
        super().__init__()
        c_mid = int(c_out * expansion)
        self.cv1 = Conv(c_in, c_mid, 1)
        self.cv2 = Conv(c_mid, c_out, 3)
        self.add = shortcut and c_in == c_out

    def forward(self, x):
        y = self.cv2(self.cv1(x))
        return x + y if self.add else y


class C3(nn.Module):
    """Cross-stage-partial bottleneck: split, process one path, re-merge."""

    def __init__(self, c_in, c_out, n=1, shortcut=True, expansion=0.5):
        super().__init__()
        c_mid = int(c_out * expansion)
        self.cv1 = Conv(c_in, c_mid, 1)
        self.cv2 = Conv(c_in, c_mid, 1)
        self.cv3 = Conv(2 * c_mid, c_out, 1)
        self.m = nn.Sequential(*(Bottleneck(c_mid, c_mid, shortcut, 1.0) for _ in range(n)))

    def forward(self, x):
        return self.cv3(torch.cat((self.m(self.cv1(x)), self.cv2(x)), dim=1))


class SPPF(nn.Module):
    """Fast spatial pyramid pooling: three chained 5x5 max-pools, concatenated."""

    def __init__(self, c_in, c_out):
        super().__init__()
        c_mid = c_in // 2
        self.cv1 = Conv(c_in, c_mid, 1)
        self.cv2 = Conv(c_mid * 4, c_out, 1)
        self.pool = nn.MaxPool2d(kernel_size=5, stride=1, padding=2)

    def forward(self, x):
        x = self.cv1(x)
        y1 = self.pool(x)
        y2 = self.pool(y1)
        y3 = self.pool(y2)
        return self.cv2(torch.cat((x, y1, y2, y3), dim=1))


class Backbone(nn.Module):
    """CSPDarknet trunk exposing the /4, /8, /16 and /32 feature maps."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c0, c1, c2, c3, c4 = cfg.channels()
        d1, d2, d3, d4 = cfg.depths()
        self.stem = Conv(cfg.input_channels, c0, k=6, s=2)
        self.down1 = Conv(c0, c1, 3, 2)
        self.stage1 = C3(c1, c1, d1)
        self.down2 = Conv(c1, c2, 3, 2)
        self.stage2 = C3(c2, c2, d2)
        self.down3 = Conv(c2, c3, 3, 2)
        self.stage3 = C3(c3, c3, d3)
        self.down4 = Conv(c3, c4, 3, 2)
        self.stage4 = C3(c4, c4, d4)
        self.sppf = SPPF(c4, c4)

    def forward(self, x):
        x = self.stem(x)
        f4 = self.stage1(self.down1(x))
        f8 = self.stage2(self.down2(f4))
        f16 = self.stage3(self.down3(f8))
        f32 = self.sppf(self.stage4(self.down4(f16)))
        return f4, f8, f16, f32


class KeypointHead(nn.Module):
    """CSP bottleneck + convs ending in 65 per-cell logits (64 + dustbin)."""

    def __init__(self, c_in, depth=1):
        super().__init__()
        self.block = C3(c_in, c_in, depth)
        self.conv = Conv(c_in, c_in, 3)
        self.out = nn.Conv2d(c_in, CELL_SIZE * CELL_SIZE + 1, 1)

    def forward(self, f8):
        return self.out(self.conv(self.block(f8)))


class DescriptorHead(nn.Module):
    """Fuses the enlarged /8 map with the /4 backbone stage, then convolves
    back down to a unit-norm descriptor grid at /8."""

    def __init__(self, c8, c4, dim, depth=1):
        super().__init__()
        self.block = C3(c8, c8, depth)
        self.fuse = C3(c8 + c4, c8, depth, shortcut=False)
        self.down = Conv(c8, c8, 3, 2)
        self.out = nn.Conv2d(c8, dim, 1)

    def forward(self, f4, f8):
        x = self.block(f8)
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.fuse(torch.cat((x, f4), dim=1))
        x = self.down(x)
        return F.normalize(self.out(x), p=2, dim=1)


class ObjectHead(nn.Module):
    """PAN neck over /8, /16, /32 plus one prediction conv per scale."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        _, _, c2, c3, c4 = cfg.channels()
        d = max(round(3 * cfg.depth_multiple), 1)
        self.num_anchors = len(cfg.anchor_spec[0])
        self.num_outputs = 5 + cfg.num_classes

        self.reduce5 = Conv(c4, c3, 1)
        self.td4 = C3(c3 + c3, c3, d, shortcut=False)
        self.reduce4 = Conv(c3, c2, 1)
        self.td3 = C3(c2 + c2, c2, d, shortcut=False)
        self.down3 = Conv(c2, c2, 3, 2)
        self.bu4 = C3(c2 + c2, c3, d, shortcut=False)
        self.down4 = Conv(c3, c3, 3, 2)
        self.bu5 = C3(c3 + c3, c4, d, shortcut=False)

        self.detect = nn.ModuleList([
            nn.Conv2d(c, self.num_anchors * self.num_outputs, 1)
            for c in (c2, c3, c4)
        ])
        for conv in self.detect:
            # bias the objectness logits towards background at init
            b = conv.bias.view(self.num_anchors, self.num_outputs)
            with torch.no_grad():
                b[:, 4] -= 4.0

    def forward(self, f8, f16, f32):
        p5 = self.reduce5(f32)
        t4 = self.td4(torch.cat((F.interpolate(p5, scale_factor=2, mode="nearest"), f16), 1))
        p4 = self.reduce4(t4)
        o3 = self.td3(torch.cat((F.interpolate(p4, scale_factor=2, mode="nearest"), f8), 1))
        o4 = self.bu4(torch.cat((self.down3(o3), p4), 1))
        o5 = self.bu5(torch.cat((self.down4(o4), p5), 1))

        raw = []
        for conv, feat in zip(self.detect, (o3, o4, o5)):
            b, _, h, w = feat.shape
            y = conv(feat).view(b, self.num_anchors, self.num_outputs, h, w)
            raw.append(y.permute(0, 1, 3, 4, 2).contiguous())
        return raw


class JointDetectionModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        _, c1, c2, _, _ = config.channels()
        head_depth = max(round(3 * config.depth_multiple), 1)
        self.backbone = Backbone(config)
        self.keypoint_head = KeypointHead(c2, head_depth)
        self.descriptor_head = DescriptorHead(c2, c1, config.descriptor_dim, head_depth)
        self.object_head = ObjectHead(config)

    def forward(self, x) -> RawModelOutput:
        _check_input_divisible(x.shape[-2], x.shape[-1])
        f4, f8, f16, f32 = self.backbone(x)
        return RawModelOutput(
            detector_logits=self.keypoint_head(f8),
            coarse_descriptors=self.descriptor_head(f4, f8),
            object_raw=self.object_head(f8, f16, f32),
        )


def _check_input_divisible(h, w):
    if h % 32 != 0:
        raise ShapeError(f"input height {h} is not divisible by 32")
    if w % 32 != 0:
        raise ShapeError(f"input width {w} is not divisible by 32")


def build_model(config: ModelConfig = None, scale: str = None) -> JointDetectionModel:
    if config is None:
        config = ModelConfig(scale=scale or "n")
    elif scale is not None and scale != config.scale:
        raise ValidationError("conflicting scale arguments")
    return JointDetectionModel(config)


def heatmap_from_logits(detector_logits):
    """Per-cell softmax over the 65 channels, dustbin dropped, remaining 64
    channels rearranged to 8x8 pixel blocks. (B, 65, Hc, Wc) -> (B, H, W),
    or unbatched (65, Hc, Wc) -> (H, W). Every output value lies in [0, 1]."""
    squeeze = detector_logits.dim() == 3
    if squeeze:
        detector_logits = detector_logits.unsqueeze(0)
    if detector_logits.dim() != 4 or detector_logits.shape[1] != CELL_SIZE * CELL_SIZE + 1:
        raise ShapeError(
            f"detector logits must have {CELL_SIZE * CELL_SIZE + 1} channels, "
            f"got shape {tuple(detector_logits.shape)}")
    probs = torch.softmax(detector_logits, dim=1)[:, :DUSTBIN_CHANNEL]
    heat = F.pixel_shuffle(probs, CELL_SIZE).squeeze(1)
    return heat[0] if squeeze else heat


def image_to_tensor(image, device="cpu"):
    """(H, W, 3) float array in [0, 1] -> validated (1, 3, H, W) tensor."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) image, got {image.shape}")
    if not np.isfinite(image).all():
        raise ValidationError("image contains non-finite values")
    if image.min() < 0 or image.max() > 1:
        raise ValidationError("image values must lie in [0, 1]")
    _check_input_divisible(image.shape[0], image.shape[1])
    t = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float()
    return t.unsqueeze(0).to(device)


@torch.no_grad()
def run_inference(model: JointDetectionModel, image, device="cpu") -> RawModelOutput:
    """Validated single-image forward pass in eval mode; numpy outputs with
    the batch dimension stripped."""
    was_training = model.training
    model.eval()
    try:
        out = model(image_to_tensor(image, device))
    finally:
        if was_training:
            model.train()
    out = out.numpy()
    return RawModelOutput(out.detector_logits[0], out.coarse_descriptors[0],
                          [o[0] for o in out.object_raw])


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def save_checkpoint(model: JointDetectionModel, path, extra=None):
    """Single binary blob: version header, serialized config, parameter arrays."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(model.config),
        "state_dict": model.state_dict(),
    }
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)


def load_checkpoint(path, expect_config: ModelConfig = None):
    """Load a checkpoint; returns (model, extra). Raises CheckpointError on a
    version mismatch, malformed payload, or config different from
    `expect_config` (when given)."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not a model checkpoint")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {payload['format_version']} != supported {CHECKPOINT_VERSION}")
    try:
        cfg_dict = dict(payload["config"])
        cfg_dict["anchor_spec"] = tuple(tuple(tuple(a) for a in s) for s in cfg_dict["anchor_spec"])
        cfg = ModelConfig(**cfg_dict)
    except (KeyError, TypeError, ValidationError) as exc:
        raise CheckpointError(f"checkpoint config is invalid: {exc}") from exc
    if expect_config is not None and dataclasses.asdict(cfg) != dataclasses.asdict(expect_config):
        raise CheckpointError("checkpoint config does not match the expected config")
    model = JointDetectionModel(cfg)
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint parameters do not fit the model: {exc}") from exc
    return model, payload.get("extra")


def load_for_finetune(path, num_classes):
    """Load a checkpoint but replace the final object detection layer for a
    new class count. All other parameter shapes must match exactly."""
    base, _ = load_checkpoint(path)
    cfg = dataclasses.replace(base.config, num_classes=num_classes)
    model = JointDetectionModel(cfg)
    state = base.state_dict()
    own = model.state_dict()
    skipped = []
    for name in list(state):
        if name.startswith("object_head.detect."):
            skipped.append(name)
            del state[name]
        elif own[name].shape != state[name].shape:
            raise CheckpointError(f"parameter {name} has shape {tuple(state[name].shape)}, "
                                  f"expected {tuple(own[name].shape)}")
    model.load_state_dict(state, strict=False)
    return model, skipped
