"""Backbones with configurable SOA insertion and the end-to-end descriptor model.

Two backbones are provided:

``toy_fcn``
    Three 3x3 stride-2 conv stages (16/32/64 channels by default, ReLU). It is
    a desk-scale stand-in for ResNet101; SOA insertion points are labelled 4
    and 5 after the conv4_x / conv5_x blocks they replace, and sit after stages
    2 and 3.
``l2net``
    The 7-layer L2-Net patch network (32x32 grayscale in, 128-d out). Insertion
    points 3-6 sit after the matching layer's activation.

Images are channel-last ``(H, W, c)`` arrays with values in [0, 1].
"""

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import DEFAULT_REDUCTION, SecondOrderAttention
from .errors import ValidationError
from .pooling import P_INIT, GeM, Whitening, l2_normalize

MIN_IMAGE_SIZE = 32
DEFAULT_SCALES = (1.0, math.sqrt(2.0), 1.0 / math.sqrt(2.0))

TOY_INSERTIONS = {4: 2, 5: 3}
L2NET_INSERTIONS = (3, 4, 5, 6)
L2NET_CONFIGS = ((3,), (4,), (5,), (6,), (3, 4), (3, 5), (4, 5), (4, 6), (3, 4, 5), (4, 5, 6))
# (out_channels, stride) for layers 1-6; layer 7 is an 8x8 valid conv
L2NET_LAYERS = ((32, 1), (32, 1), (64, 2), (64, 1), (128, 2), (128, 1))
L2NET_DIM = 128
L2NET_PATCH = 32


@dataclass
class BackboneSpec:
    kind: str = "toy_fcn"
    soa_insertions: tuple = ()
    widths: tuple = (16, 32, 64)
    in_channels: int = 3
    reduction: int = DEFAULT_REDUCTION
    min_size: int = MIN_IMAGE_SIZE
    seed: int = 0

    def __post_init__(self):
        self.soa_insertions = tuple(sorted(int(i) for i in self.soa_insertions))
        self.widths = tuple(int(w) for w in self.widths)
        if self.kind == "toy_fcn":
            bad = set(self.soa_insertions) - set(TOY_INSERTIONS)
            if len(self.widths) != 3:
                raise ValidationError(f"toy_fcn needs 3 stage widths, got {self.widths}")
        elif self.kind == "l2net":
            bad = set(self.soa_insertions) - set(L2NET_INSERTIONS)
            self.in_channels = 1
        else:
            raise ValidationError(f"unknown backbone kind {self.kind!r}")
        if bad:
            raise ValidationError(f"illegal SOA insertion(s) {sorted(bad)} for {self.kind}")

    def to_text(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_text(cls, text):
        return cls(**json.loads(text))


class ToyFCN(nn.Module):
    # inputs in [0, 1] are standardised with these fixed constants
    pixel_mean = 0.5
    pixel_std = 0.25

    def __init__(self, widths=(16, 32, 64), in_channels=3):
        super().__init__()
        chans = (in_channels,) + tuple(widths)
        self.stages = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1) for i in range(3))
        for conv in self.stages:
            nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
            nn.init.zeros_(conv.bias)

    @property
    def out_channels(self):
        return self.stages[-1].out_channels

    def channels_at(self, insertion):
        return self.stages[TOY_INSERTIONS[insertion] - 1].out_channels

    def stride_at(self, insertion):
        return 2 ** TOY_INSERTIONS[insertion]

    def layers(self):
        """Yield ``(name, insertion label or None, callable)`` in forward order."""
        labels = {stage: label for label, stage in TOY_INSERTIONS.items()}
        yield "input", None, lambda x: (x - self.pixel_mean) / self.pixel_std
        for i, conv in enumerate(self.stages, start=1):
            yield f"stage{i}", labels.get(i), lambda x, conv=conv: F.relu(conv(x))


class L2Net(nn.Module):
    def __init__(self, dropout=0.1):
        super().__init__()
        convs, c_in = [], 1
        for c_out, s in L2NET_LAYERS:
            convs.append(nn.Conv2d(c_in, c_out, 3, stride=s, padding=1, bias=False))
            c_in = c_out
        convs.append(nn.Conv2d(c_in, L2NET_DIM, 8, bias=False))
        self.convs = nn.ModuleList(convs)
        self.dropout = nn.Dropout(dropout)

    @property
    def out_channels(self):
        return L2NET_DIM

    def channels_at(self, insertion):
        return L2NET_LAYERS[insertion - 1][0]

    def stride_at(self, insertion):
        return math.prod(s for _, s in L2NET_LAYERS[:insertion])

    def layers(self):
        # per-map instance standardisation stands in for batch norm
        yield "input_norm", None, lambda x: F.instance_norm(x)
        for i, conv in enumerate(self.convs[:-1], start=1):
            yield f"layer{i}", i, lambda x, conv=conv: F.relu(F.instance_norm(conv(x)))
        yield "layer7", None, lambda x: self.convs[-1](self.dropout(x))


class DescriptorModel(nn.Module):
    """Backbone -> SOA blocks -> (GeM -> whitening) -> l2.

    For ``l2net`` the final 1x1 map is the descriptor and no GeM/whitening
    head is attached.
    """

    def __init__(self, spec=None, p=P_INIT, whiten_dim=None):
        super().__init__()
        spec = BackboneSpec() if spec is None else spec
        self.spec = spec
        with torch.random.fork_rng():
            torch.manual_seed(spec.seed)
            if spec.kind == "toy_fcn":
                self.backbone = ToyFCN(spec.widths, spec.in_channels)
            else:
                self.backbone = L2Net()
        self.soa = nn.ModuleDict({
            str(i): SecondOrderAttention(self.backbone.channels_at(i), spec.reduction,
                                         seed=spec.seed * 100 + i)
            for i in spec.soa_insertions})
        if spec.kind == "toy_fcn":
            self.gem = GeM(p)
            self.whitening = Whitening(self.backbone.out_channels, whiten_dim)
        else:
            self.gem = None
            self.whitening = None

    @property
    def dim(self):
        if self.whitening is not None:
            return self.whitening.weight.shape[0]
        return self.backbone.out_channels

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def backbone_parameters(self):
        return list(self.backbone.parameters())

    def trace(self, x):
        """Run the backbone on an NCHW batch.

        Returns ``(final map, activations, attention)``: activations are keyed
        by layer name (taken after any SOA at that point), attention maps by
        insertion label.
        """
        acts, attn = {}, {}
        for name, label, layer in self.backbone.layers():
            x = layer(x)
            key = str(label)
            if key in self.soa:
                f, z = self.soa[key](x.permute(0, 2, 3, 1))
                x = f.permute(0, 3, 1, 2)
                attn[label] = z
            acts[name] = x
        return x, acts, attn

    def features(self, x):
        """Channel-last final feature map ``(B, h, w, d)``."""
        return self.trace(x)[0].permute(0, 2, 3, 1)

    def head(self, f):
        if self.gem is None:
            return l2_normalize(f.flatten(1))
        return l2_normalize(self.whitening(self.gem(f)))

    def forward(self, x):
        """NCHW batch -> ``(B, dim)`` unit descriptors."""
        return self.head(self.features(x))


def to_tensor(image, dtype=torch.float32):
    """``(H, W, c)`` or ``(N, H, W, c)`` array -> NCHW tensor."""
    t = torch.as_tensor(np.asarray(image), dtype=dtype)
    if t.dim() == 2:
        t = t[..., None]
    if t.dim() == 3:
        t = t[None]
    return t.permute(0, 3, 1, 2).contiguous()


def _check_size(x, min_size, what="image"):
    h, w = x.shape[-2:]
    if min(h, w) < min_size:
        raise ValidationError(f"{what} is {h}x{w}; the backbone needs at least {min_size}x{min_size}")


def toy_fcn_forward(image, model):
    """Feature map ``(h, w, d)`` of one image; ``h, w = ceil(H/8), ceil(W/8)``."""
    x = to_tensor(image, model.dtype)
    _check_size(x, model.spec.min_size)
    return model.features(x)[0]


def l2net_forward(patch, model, return_activations=False):
    x = to_tensor(patch, model.dtype)
    if tuple(x.shape[1:]) != (1, L2NET_PATCH, L2NET_PATCH):
        raise ValidationError(f"L2-Net needs a 32x32x1 patch, got {tuple(x.shape[1:])}")
    out, acts, _ = model.trace(x)
    desc = l2_normalize(out.flatten(1))[0]
    return (desc, acts) if return_activations else desc


def global_descriptor(image, model):
    x = to_tensor(image, model.dtype) if not torch.is_tensor(image) else image
    _check_size(x, model.spec.min_size)
    return model(x)[0]


def rescale(x, scale):
    h, w = x.shape[-2:]
    size = (max(1, round(h * scale)), max(1, round(w * scale)))
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def multi_scale_descriptor(image, model, scales=DEFAULT_SCALES):
    x = to_tensor(image, model.dtype) if not torch.is_tensor(image) else image
    if len(scales) == 0:
        raise ValidationError("need at least one scale")
    descs = []
    for s in scales:
        if s <= 0:
            raise ValidationError(f"scale must be positive, got {s}")
        xs = x if s == 1 else rescale(x, s)
        if min(xs.shape[-2:]) < model.spec.min_size:
            raise ValidationError(
                f"scale {s} shrinks the image to {tuple(xs.shape[-2:])}, "
                f"below the {model.spec.min_size}px minimum")
        descs.append(model(xs)[0])
    if len(descs) == 1:
        return descs[0]
    return l2_normalize(torch.stack(descs).mean(dim=0))


def crop(image, bbox):
    """Crop an ``(H, W, c)`` array to ``[x0, y0, x1, y1]`` (pixel bounds, exclusive max)."""
    x0, y0, x1, y1 = (int(round(v)) for v in bbox)
    h, w = image.shape[:2]
    x0, y0, x1, y1 = max(0, x0), max(0, y0), min(w, x1), min(h, y1)
    if x1 <= x0 or y1 <= y0:
        raise ValidationError(f"bounding box {bbox} is empty inside a {w}x{h} image")
    return image[y0:y1, x0:x1]


@torch.no_grad()
def extract_descriptors(images, model, scales=(1.0,), batch_size=32):
    """Descriptors for a list/array of images as a float64 ``(n, dim)`` array."""
    was_training = model.training
    model.eval()
    try:
        if tuple(scales) == (1.0,) and len({np.shape(im) for im in images}) == 1:
            out = []
            for i in range(0, len(images), batch_size):
                x = to_tensor(np.stack(images[i:i + batch_size]), model.dtype)
                _check_size(x, model.spec.min_size)
                out.append(model(x))
            return torch.cat(out).double().numpy()
        return np.stack([multi_scale_descriptor(im, model, scales).double().numpy()
                         for im in images])
    finally:
        model.train(was_training)



def transfer(base, spec):
    """New model of ``spec`` carrying every weight of ``base`` it shares.

    SOA blocks absent from ``base`` keep their identity initialisation, so the
    result computes the same descriptors as ``base`` until it is trained.
    """
    model = DescriptorModel(spec, whiten_dim=base.dim if base.whitening is not None else None)
    missing, unexpected = model.load_state_dict(base.state_dict(), strict=False)
    if unexpected or any(not k.startswith("soa.") for k in missing):
        raise ValidationError(f"cannot transfer weights: missing {missing}, unexpected {unexpected}")
    return model
