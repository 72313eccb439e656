"""Backbones, output heads, 2D->3D inflation and the segmentation decoder.

Every network is written once, parameterized by ``ndim``. A 3D twin has the
same module tree as its 2D source: spatial strides and pooling are unchanged,
the temporal axis always has stride 1 and "same" zero padding, so N_S input
frames yield N_S outputs.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ChannelUnderflow, ShapeMismatch, UnsupportedLayer

log = logging.getLogger(__name__)

N_DOWNSAMPLE = 5
N_SEG_CLASSES = 3
HEAD_OUTPUTS = {"regression": 11, "classification": 2, "joint": 13}


@dataclass(frozen=True)
class BackboneSpec:
    arch_id: str
    stem_channels: int
    stage_channels: tuple[int, ...]
    blocks_per_stage: tuple[int, ...]
    in_channels: int = 3
    input_size: int = 224

    def __post_init__(self):
        if len(self.stage_channels) != len(self.blocks_per_stage):
            raise ValueError("stage_channels and blocks_per_stage differ in length")
        if not 1 <= len(self.stage_channels) <= N_DOWNSAMPLE:
            raise ValueError(f"stage count must be in [1, {N_DOWNSAMPLE}]")

    @property
    def feature_channels(self) -> int:
        return self.stage_channels[-1]

    @property
    def stem_downsamples(self) -> int:
        return N_DOWNSAMPLE - len(self.stage_channels)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "BackboneSpec":
        d = dict(d)
        d["stage_channels"] = tuple(d["stage_channels"])
        d["blocks_per_stage"] = tuple(d["blocks_per_stage"])
        return cls(**d)


# desk-scale stand-ins for the published backbones; the last stage of "mini"
# is 96 wide so the decoder can halve it five times (96 -> 3)
BACKBONES = {
    "mini": BackboneSpec("mini", 8, (8, 96), (1, 1)),
    # wider two-stage miniature used by the desk-scale learning run
    "mini-wide": BackboneSpec("mini-wide", 16, (32, 96), (1, 1)),
    "small": BackboneSpec("small", 16, (16, 32, 96), (1, 1, 1)),
    "base": BackboneSpec("base", 32, (32, 64, 128, 256), (2, 2, 2, 2)),
}


@dataclass(frozen=True)
class HeadSpec:
    targets: str = "regression"  # regression | classification | joint

    def __post_init__(self):
        if self.targets not in HEAD_OUTPUTS:
            raise ValueError(f"unknown head targets {self.targets!r}")

    @property
    def outputs(self) -> int:
        return HEAD_OUTPUTS[self.targets]

    @property
    def has_regression(self) -> bool:
        return self.targets in ("regression", "joint")

    @property
    def has_phase(self) -> bool:
        return self.targets in ("classification", "joint")


# ------------------------------------------------------------------ layers


def _conv(ndim, cin, cout, k, stride=1, pad=0, depth=None, bias=False):
    if ndim == 2:
        return nn.Conv2d(cin, cout, k, stride, pad, bias=bias)
    d = k if depth is None else depth
    if d % 2 == 0:
        raise ValueError(f"temporal kernel depth must be odd, got {d}")
    return nn.Conv3d(cin, cout, (d, k, k), (1, stride, stride), ((d - 1) // 2, pad, pad), bias=bias)


def _bn(ndim, c):
    return nn.BatchNorm2d(c) if ndim == 2 else nn.BatchNorm3d(c)


def _maxpool(ndim):
    if ndim == 2:
        return nn.MaxPool2d(3, 2, 1)
    return nn.MaxPool3d((1, 3, 3), (1, 2, 2), (0, 1, 1))


class BasicBlock(nn.Module):
    """Two 3x3 convolutions with a residual shortcut (projection when shapes change)."""

    def __init__(self, ndim, cin, cout, stride=1, depth=None):
        super().__init__()
        self.conv1 = _conv(ndim, cin, cout, 3, stride, 1, depth)
        self.bn1 = _bn(ndim, cout)
        self.conv2 = _conv(ndim, cout, cout, 3, 1, 1, depth)
        self.bn2 = _bn(ndim, cout)
        self.relu = nn.ReLU(inplace=False)
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(_conv(ndim, cin, cout, 1, stride, 0, None if depth is None else 1), _bn(ndim, cout))
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


class Body(nn.Module):
    """Stem plus residual stages; total spatial downsampling is 2**5."""

    def __init__(self, spec: BackboneSpec, ndim=2, depth=None):
        super().__init__()
        n_stem = spec.stem_downsamples
        stem = [
            _conv(ndim, spec.in_channels, spec.stem_channels, 3, 2 if n_stem > 0 else 1, 1, depth),
            _bn(ndim, spec.stem_channels),
            nn.ReLU(inplace=False),
        ]
        stem += [_maxpool(ndim) for _ in range(max(n_stem - 1, 0))]
        self.stem = nn.Sequential(*stem)
        stages, cin = [], spec.stem_channels
        for cout, nblocks in zip(spec.stage_channels, spec.blocks_per_stage):
            blocks = [BasicBlock(ndim, cin, cout, 2, depth)]
            blocks += [BasicBlock(ndim, cout, cout, 1, depth) for _ in range(nblocks - 1)]
            stages.append(nn.Sequential(*blocks))
            cin = cout
        self.stages = nn.Sequential(*stages)

    def forward(self, x):
        return self.stages(self.stem(x))


class SRDecoder(nn.Module):
    """Five stages of [1x1 conv halving channels -> nearest x2 upsampling -> residual block].

    For 3D inputs every layer has temporal kernel 1, so frames are decoded
    independently.
    """

    def __init__(self, in_channels: int, ndim=2, n_classes=N_SEG_CLASSES):
        super().__init__()
        if in_channels // 2**N_DOWNSAMPLE < n_classes:
            raise ChannelUnderflow(
                f"{in_channels} feature channels halve to {in_channels // 2**N_DOWNSAMPLE} (< {n_classes}) after {N_DOWNSAMPLE} stages"
            )
        scale = 2 if ndim == 2 else (1, 2, 2)
        stages, c = [], in_channels
        for _ in range(N_DOWNSAMPLE):
            half = c // 2
            stages.append(
                nn.Sequential(
                    _conv(ndim, c, half, 1, depth=1),
                    nn.Upsample(scale_factor=scale, mode="nearest"),
                    BasicBlock(ndim, half, half, 1, depth=1),
                )
            )
            c = half
        self.stages = nn.Sequential(*stages)
        self.out = _conv(ndim, c, n_classes, 1, depth=1, bias=True)
        self.channel_sequence = [in_channels // 2**k for k in range(1, N_DOWNSAMPLE + 1)]

    def forward(self, features):
        return self.out(self.stages(features))


class LVNet(nn.Module):
    """Backbone + output head (+ optional segmentation decoder).

    ``forward`` returns a dict with ``regression`` (b, 11) or (b, N_S, 11),
    ``phase_logits`` (b, 2) / (b, N_S, 2) and ``seg_logits`` (b, 3, [N_S,] H, W);
    absent heads map to None. 3D inputs are (b, 3, N_S, H, W).
    """

    def __init__(self, spec: BackboneSpec, head: HeadSpec, ndim=2, sr=False, depth=None):
        super().__init__()
        self.spec, self.head_spec, self.ndim, self.depth = spec, head, ndim, depth
        self.body = Body(spec, ndim, depth)
        c = spec.feature_channels
        self.head = nn.Linear(c, head.outputs) if ndim == 2 else nn.Conv1d(c, head.outputs, 1)
        # zero head: every init starts from the same constant prediction
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.decoder = SRDecoder(c, ndim) if sr else None

    @property
    def sr(self) -> bool:
        return self.decoder is not None

    def features(self, x):
        return self.body(x)

    def pooled(self, feats):
        if self.ndim == 2:
            return feats.mean(dim=(2, 3))
        return feats.mean(dim=(3, 4))  # (b, C, N_S): spatial pooling only

    def forward(self, x, with_seg=None):
        feats = self.body(x)
        pooled = self.pooled(feats)
        out = self.head(pooled)
        if self.ndim == 3:
            out = out.transpose(1, 2)  # (b, N_S, outputs)
        h = self.head_spec
        result = {
            "regression": out[..., :11] if h.has_regression else None,
            "phase_logits": out[..., -2:] if h.has_phase else None,
            "seg_logits": None,
        }
        if self.decoder is not None and (with_seg if with_seg is not None else self.training):
            result["seg_logits"] = self.decoder(feats)
        return result


def split_outputs(result) -> tuple:
    """(regression values, phase probabilities) from a forward result."""
    reg = result["regression"]
    probs = None if result["phase_logits"] is None else torch.softmax(result["phase_logits"], dim=-1)
    return reg, probs


# ------------------------------------------------------------ construction


def build_2d(
    spec: BackboneSpec,
    head: HeadSpec,
    init: str = "random",
    checkpoint=None,
    sr: bool = False,
    seed: int | None = None,
) -> LVNet:
    """2D model; with ``init='pretrained'`` the body comes from ``checkpoint``.

    The head (and decoder) are always freshly initialized.
    """
    if seed is not None:
        torch.manual_seed(seed)
    model = LVNet(spec, head, ndim=2, sr=sr)
    if init == "pretrained":
        if checkpoint is None:
            raise ValueError("init='pretrained' needs a checkpoint")
        ckpt = load_checkpoint(checkpoint) if not isinstance(checkpoint, dict) else checkpoint
        if BackboneSpec.from_dict(ckpt["meta"]["spec"]) != spec:
            raise ShapeMismatch(f"checkpoint spec {ckpt['meta']['spec']} != requested {spec.to_dict()}")
        body = {k[len("body.") :]: v for k, v in ckpt["tensors"].items() if k.startswith("body.")}
        own = model.body.state_dict()
        for k, v in body.items():
            if k not in own or tuple(own[k].shape) != tuple(v.shape):
                raise ShapeMismatch(f"checkpoint tensor {k} does not fit")
        model.body.load_state_dict({k: torch.as_tensor(v) for k, v in body.items()})
    elif init != "random":
        raise ValueError(f"unknown init {init!r}")
    model.init_lineage = [init] + ([ckpt["meta"].get("lineage", "checkpoint")] if init == "pretrained" else [])
    return model


_SUPPORTED_2D = (nn.Conv2d, nn.BatchNorm2d, nn.ReLU, nn.MaxPool2d, nn.Linear, nn.Upsample, nn.Identity)


def inflate_kernel(w2d: torch.Tensor, d_c: int) -> torch.Tensor:
    """Replicate a (C_out, C_in, h, w) kernel ``d_c`` times along a new depth axis, scaled by 1/d_c.

    All copies equal fl(w / d_c) except the centre copy, which absorbs the
    float rounding residue so the depth-sum reproduces ``w2d`` exactly.
    """
    w = w2d.detach().to(torch.float64)
    q = (w2d.detach() / d_c).to(torch.float64)
    centre = w - (d_c - 1) * q
    out = q.unsqueeze(2).repeat(1, 1, d_c, 1, 1)
    out[:, :, (d_c - 1) // 2] = centre
    return out.to(w2d.dtype)


def inflate_to_3d(model2d: LVNet, d_c: int | None = None) -> LVNet:
    """3D twin of ``model2d`` initialized from its weights.

    ``d_c=None`` uses each convolution's spatial kernel size as its temporal
    depth (1x1 convolutions stay 1 deep). Normalization statistics and affine
    parameters are copied unchanged; the linear head becomes a kernel-1
    temporal convolution with the same weights.
    """
    for name, m in model2d.named_modules():
        if len(list(m.children())) == 0 and not isinstance(m, _SUPPORTED_2D):
            raise UnsupportedLayer(f"{name}: {type(m).__name__} has no 3D counterpart")
    if d_c is not None and d_c % 2 == 0:
        raise ValueError("d_c must be odd")
    model3d = LVNet(model2d.spec, model2d.head_spec, ndim=3, sr=model2d.sr, depth=d_c)
    src = model2d.state_dict()
    new = {}
    for k, v3 in model3d.state_dict().items():
        if k not in src:
            raise UnsupportedLayer(f"no 2D source for {k}")
        v2 = src[k]
        if v3.dim() == 5 and v2.dim() == 4:
            new[k] = inflate_kernel(v2, v3.shape[2])
        elif k.startswith("head.") and v3.dim() == 3 and v2.dim() == 2:
            new[k] = v2.unsqueeze(-1).clone()
        elif v3.shape == v2.shape:
            new[k] = v2.clone()
        else:
            raise UnsupportedLayer(f"cannot map {k}: {tuple(v2.shape)} -> {tuple(v3.shape)}")
    model3d.load_state_dict(new)
    model3d.train(model2d.training)
    model3d.init_lineage = list(getattr(model2d, "init_lineage", [])) + ["inflated"]
    return model3d


def attach_sr_decoder(model: LVNet) -> LVNet:
    """Add a freshly initialized segmentation decoder in place (returns the model)."""
    model.decoder = SRDecoder(model.spec.feature_channels, model.ndim)
    return model


# -------------------------------------------------------------- checkpoints


def save_checkpoint(directory, model: LVNet | None = None, tensors: dict | None = None, meta: dict | None = None) -> Path:
    """Write ``params.bin`` (raw little-endian arrays) and ``checkpoint.json``.

    ``checkpoint.json`` lists every tensor's name, dtype, shape and byte
    offset alongside the backbone spec, head and init lineage.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if tensors is None:
        tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = dict(meta or {})
    if model is not None:
        meta.setdefault("spec", model.spec.to_dict())
        meta.setdefault("head", model.head_spec.targets)
        meta.setdefault("ndim", model.ndim)
        meta.setdefault("sr", model.sr)
        meta.setdefault("depth", model.depth)
        meta.setdefault("lineage", "/".join(getattr(model, "init_lineage", ["random"])))
    entries, offset = [], 0
    with open(directory / "params.bin", "wb") as f:
        for name in sorted(tensors):
            arr = np.asarray(tensors[name])
            arr = arr.astype("<f4") if arr.dtype.kind == "f" else arr.astype("<i8")
            raw = arr.tobytes(order="C")
            f.write(raw)
            entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    with open(directory / "checkpoint.json", "w", encoding="utf-8") as f:
        json.dump({"meta": meta, "tensors": entries}, f, indent=2, sort_keys=True)
        f.write("\n")
    return directory


def load_checkpoint(directory) -> dict:
    directory = Path(directory)
    with open(directory / "checkpoint.json", encoding="utf-8") as f:
        manifest = json.load(f)
    raw = (directory / "params.bin").read_bytes()
    tensors = {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"])
        tensors[e["name"]] = arr.reshape(e["shape"]).copy()
    return {"meta": manifest["meta"], "tensors": tensors}


def model_from_checkpoint(directory) -> LVNet:
    ckpt = load_checkpoint(directory)
    meta = ckpt["meta"]
    model = LVNet(BackboneSpec.from_dict(meta["spec"]), HeadSpec(meta["head"]), meta["ndim"], meta["sr"], meta.get("depth"))
    model.load_state_dict({k: torch.as_tensor(v) for k, v in ckpt["tensors"].items()})
    model.eval()
    return model


# --------------------------------------------------------- pretext pretraining

PRETEXT_RADIUS_BINS = ((12.0, 15.5), (15.5, 19.0), (19.0, 22.5), (22.5, 26.0), (26.0, 30.0))  # mm
PRETEXT_WALL_BINS = ((5.0, 7.5), (10.0, 14.0))  # mm
PRETEXT_CLASSES = len(PRETEXT_RADIUS_BINS) * len(PRETEXT_WALL_BINS)
PRETEXT_SPACING = 1.1719  # mm/px of the 256 px phantom canvas


def render_pretext_image(label: int, rng, size: int = 224) -> np.ndarray:
    """Static phantom slice whose class is (cavity radius bin, wall thickness bin).

    Geometry, intensities, noise and bias field come from the phantom
    generator; the slice is centre-cropped to ``size`` and normalized like
    preprocessed data.
    """
    from .data import center_crop_or_pad, normalize_slice
    from .phantom import _bias_field, render_frame, sample_params

    r_bin, w_bin = divmod(int(label), len(PRETEXT_WALL_BINS))
    params = replace(
        sample_params(int(rng.integers(2**31))),
        resolution=256,
        pixel_spacing=PRETEXT_SPACING,
        base_endo_radius=float(rng.uniform(*PRETEXT_RADIUS_BINS[r_bin])),
        base_wall_thickness=float(rng.uniform(*PRETEXT_WALL_BINS[w_bin])),
        contraction_amplitude=0.0,
    )
    img, _ = render_frame(params, 0, rng)
    img = center_crop_or_pad(img + _bias_field(params, rng), size)
    return normalize_slice(img).astype(np.float32)


def make_pretext_dataset(n: int, seed: int, size: int = 224):
    """Balanced (images (n, 3, H, W), labels (n,)) for the shape-classification pretext task."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % PRETEXT_CLASSES
    rng.shuffle(labels)
    images = np.stack([np.stack([render_pretext_image(int(l), rng, size)] * 3) for l in labels])
    return images, labels.astype(np.int64)


def chance_threshold(n_classes: int, n_eval: int, n_sigma: float = 3.0) -> float:
    """Chance accuracy plus ``n_sigma`` binomial standard deviations."""
    p = 1.0 / n_classes
    return p + n_sigma * np.sqrt(p * (1 - p) / n_eval)


def pretext_pretrain(
    spec: BackboneSpec,
    n_train: int = 800,
    n_val: int = 200,
    epochs: int = 4,
    seed: int = 0,
    lr: float = 1e-3,
    batch_size: int = 16,
    out_dir=None,
    image_size: int | None = None,
) -> dict:
    """Train the body on the synthetic shape task and return a body-only checkpoint dict.

    The classification head is discarded; validation accuracy and the chance
    threshold are stored in the checkpoint metadata.
    """
    size = image_size or spec.input_size
    torch.manual_seed(seed)
    body = Body(spec, 2)
    clf = nn.Linear(spec.feature_channels, PRETEXT_CLASSES)
    x_tr, y_tr = make_pretext_dataset(n_train, seed, size)
    x_va, y_va = make_pretext_dataset(n_val, seed + 1, size)
    opt = torch.optim.Adam(list(body.parameters()) + list(clf.parameters()), lr=lr)
    rng = np.random.default_rng(seed)
    losses = []
    for epoch in range(epochs):
        body.train()
        order = rng.permutation(n_train)
        total = 0.0
        for i in range(0, n_train - batch_size + 1, batch_size):
            idx = order[i : i + batch_size]
            logits = clf(body(torch.from_numpy(x_tr[idx])).mean(dim=(2, 3)))
            loss = F.cross_entropy(logits, torch.from_numpy(y_tr[idx]))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
        losses.append(total / (n_train // batch_size))
        log.info("pretext epoch %d loss %.4f", epoch, losses[-1])
    body.eval()
    with torch.no_grad():
        preds = []
        for i in range(0, n_val, 50):
            preds.append(clf(body(torch.from_numpy(x_va[i : i + 50])).mean(dim=(2, 3))).argmax(1).numpy())
    acc = float((np.concatenate(preds) == y_va).mean())
    meta = {
        "spec": spec.to_dict(),
        "lineage": f"pretext(seed={seed})",
        "pretext": {
            "classes": PRETEXT_CLASSES,
            "n_val": n_val,
            "val_accuracy": acc,
            "chance_threshold": float(chance_threshold(PRETEXT_CLASSES, n_val)),
            "epoch_losses": losses,
        },
    }
    tensors = {f"body.{k}": v.detach().numpy().copy() for k, v in body.state_dict().items()}
    ckpt = {"meta": meta, "tensors": tensors}
    if out_dir is not None:
        save_checkpoint(out_dir, tensors=tensors, meta=meta)
    return ckpt
