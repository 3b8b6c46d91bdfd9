"""TMVA4D: multi-view temporal encoders, ASPP, latent fusion and an EA decoder."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .views import VIEW_IDS

_REFERENCE_SHAPES = {
    "EA": (128, 128),
    "ER": (128, 256),
    "ED": (128, 256),
    "RA": (256, 128),
    "DA": (256, 128),
}


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    window: int = 5
    view_shapes: Mapping[str, tuple[int, int]] = field(default_factory=lambda: dict(_REFERENCE_SHAPES))
    conv3d_channels: tuple[int, ...] = (16, 32)
    conv2d_channels: tuple[int, ...] = (64, 64)
    aspp_rates: tuple[int, ...] = (1, 6, 12, 18)
    aspp_channels: int = 512
    latent_size: tuple[int, int] = (32, 32)
    decoder_channels: tuple[int, int] = (128, 64)
    n_classes: int = 2

    @classmethod
    def reference(cls) -> "NetworkConfig":
        return cls()

    @classmethod
    def tiny(cls) -> "NetworkConfig":
        """Full view resolution, few channels: desk-scale training."""
        return cls(
            conv3d_channels=(4, 8),
            conv2d_channels=(8, 8),
            aspp_rates=(1, 2, 4),
            aspp_channels=8,
            decoder_channels=(16, 8),
        )

    @classmethod
    def gradcheck(cls) -> "NetworkConfig":
        """8x8 views, window 3, two channels everywhere: finite-difference checks."""
        return cls(
            window=3,
            view_shapes={v: (8, 8) for v in VIEW_IDS},
            conv3d_channels=(2, 2),
            conv2d_channels=(2, 2),
            aspp_rates=(1,),
            aspp_channels=2,
            latent_size=(2, 2),
            decoder_channels=(2, 2),
        )

    # shape algebra ------------------------------------------------------

    def depth_kernels(self) -> list[int]:
        """Temporal kernel per 3D stage: 3 while depth remains, then 1."""
        depth, out = self.window, []
        for _ in self.conv3d_channels:
            k = 3 if depth >= 3 else 1
            out.append(k)
            depth -= k - 1
        return out

    def pools(self, view_id: str) -> list[bool]:
        p = [True] * len(self.conv3d_channels)
        if view_id == "EA":
            p[0] = False
        return p

    def encoder_shape(self, view_id: str) -> tuple[int, int]:
        r, c = self.view_shapes[view_id]
        f = 2 ** sum(self.pools(view_id))
        return (r // f, c // f)

    def validate(self) -> None:
        if set(self.view_shapes) != set(VIEW_IDS):
            raise ValueError(f"view_shapes must cover {VIEW_IDS}")
        depth = self.window - sum(k - 1 for k in self.depth_kernels())
        if self.window < 1 or depth != 1:
            raise ValueError(
                f"window {self.window} cannot be collapsed to depth 1 by "
                f"{len(self.conv3d_channels)} kernel-3 stages (needs an odd window)"
            )
        if not self.conv2d_channels:
            raise ValueError("need at least one 2D conv in the encoder")
        for vid in VIEW_IDS:
            r, c = self.view_shapes[vid]
            f = 2 ** sum(self.pools(vid))
            if r % f or c % f:
                raise ValueError(f"{vid} view {r}x{c} is not divisible by pooling factor {f}")
            er, ec = self.encoder_shape(vid)
            if max(self.aspp_rates) >= min(er, ec):
                raise ValueError(
                    f"ASPP rate {max(self.aspp_rates)} reaches beyond the {er}x{ec} "
                    f"{vid} feature map"
                )
        lr, lc = self.latent_size
        if (4 * lr, 4 * lc) != tuple(self.view_shapes["EA"]):
            raise ValueError("decoder output (4 x latent) must equal the EA view shape")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["view_shapes"] = {k: list(v) for k, v in self.view_shapes.items()}
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown network keys: {sorted(unknown)}")
        kw = dict(d)
        if "view_shapes" in kw:
            kw["view_shapes"] = {k: tuple(v) for k, v in kw["view_shapes"].items()}
        for k, v in list(kw.items()):
            if isinstance(v, list):
                kw[k] = tuple(v)
        return cls(**kw)

    def digest(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()


def count_params(cfg: NetworkConfig) -> int:
    """Closed-form trainable parameter count."""

    def conv(cin, cout, kernel_volume):
        return cin * cout * kernel_volume + cout

    enc = 0
    cin = 1
    for cout, kd in zip(cfg.conv3d_channels, cfg.depth_kernels()):
        enc += conv(cin, cout, kd * 9)
        cin = cout
    for cout in cfg.conv2d_channels:
        enc += conv(cin, cout, 9)
        cin = cout
    width = cin
    b = cfg.aspp_channels
    aspp = conv(width, b, 1) + len(cfg.aspp_rates) * conv(width, b, 9)
    aspp += conv((1 + len(cfg.aspp_rates)) * b, width, 1)
    d1, d2 = cfg.decoder_channels
    dec = conv(5 * width, d1, 4) + conv(d1, d1, 9) + conv(d1, d2, 4) + conv(d2, d2, 9)
    dec += conv(d2, cfg.n_classes, 1)
    return len(VIEW_IDS) * (enc + aspp) + dec


class Encoder(nn.Module):
    """Temporal 3D convolutions (depth collapsed to 1), then 2D convolutions."""

    def __init__(self, cfg: NetworkConfig, view_id: str):
        super().__init__()
        self.view_id = view_id
        self.input_shape = (cfg.window, *cfg.view_shapes[view_id])
        self.pools = cfg.pools(view_id)
        self.conv3d = nn.ModuleList()
        cin = 1
        for cout, kd in zip(cfg.conv3d_channels, cfg.depth_kernels()):
            self.conv3d.append(nn.Conv3d(cin, cout, (kd, 3, 3), padding=(0, 1, 1)))
            cin = cout
        self.conv2d = nn.ModuleList()
        for cout in cfg.conv2d_channels:
            self.conv2d.append(nn.Conv2d(cin, cout, 3, padding=1))
            cin = cout

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(
                f"encoder[{self.view_id}]: expected (B, {', '.join(map(str, self.input_shape))}), "
                f"got {tuple(x.shape)}"
            )
        x = x.unsqueeze(1)
        for conv, pool in zip(self.conv3d, self.pools):
            x = F.relu(conv(x))
            if pool:
                x = F.max_pool3d(x, (1, 2, 2))
        x = x.squeeze(2)
        for conv in self.conv2d:
            x = F.relu(conv(x))
        return x


class ASPP(nn.Module):
    def __init__(self, channels: int, branch_channels: int, rates: tuple[int, ...]):
        super().__init__()
        self.rates = tuple(rates)
        self.point = nn.Conv2d(channels, branch_channels, 1)
        self.atrous = nn.ModuleList(
            nn.Conv2d(channels, branch_channels, 3, padding=r, dilation=r) for r in rates
        )
        self.fuse = nn.Conv2d((1 + len(rates)) * branch_channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        branches = [F.relu(self.point(x))] + [F.relu(conv(x)) for conv in self.atrous]
        return F.relu(self.fuse(torch.cat(branches, dim=1)))


class Decoder(nn.Module):
    """Two x2 transposed-conv upsampling stages, then a 1x1 conv to class logits."""

    def __init__(self, in_channels: int, channels: tuple[int, int], n_classes: int):
        super().__init__()
        d1, d2 = channels
        self.up1 = nn.ConvTranspose2d(in_channels, d1, 2, stride=2)
        self.conv1 = nn.Conv2d(d1, d1, 3, padding=1)
        self.up2 = nn.ConvTranspose2d(d1, d2, 2, stride=2)
        self.conv2 = nn.Conv2d(d2, d2, 3, padding=1)
        self.head = nn.Conv2d(d2, n_classes, 1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.up1(z))
        x = F.relu(self.conv1(x))
        x = F.relu(self.up2(x))
        x = F.relu(self.conv2(x))
        return self.head(x)


def latent_fuse(features: Mapping[str, torch.Tensor], size: tuple[int, int]) -> torch.Tensor:
    """Corner-aligned bilinear resize of every view to ``size``, concatenated EA, ER, ED, RA, DA."""
    missing = [v for v in VIEW_IDS if v not in features]
    if missing:
        raise ShapeError(f"latent_fuse: missing views {missing}")
    out = []
    for vid in VIEW_IDS:
        f = features[vid]
        if tuple(f.shape[-2:]) != tuple(size):
            f = F.interpolate(f, size=tuple(size), mode="bilinear", align_corners=True)
        out.append(f)
    return torch.cat(out, dim=1)


class TMVA4D(nn.Module):
    def __init__(self, cfg: NetworkConfig, seed: int = 0, debug: bool = False):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.debug = debug
        width = cfg.conv2d_channels[-1]
        self.encoders = nn.ModuleDict({v.lower(): Encoder(cfg, v) for v in VIEW_IDS})
        self.aspp = nn.ModuleDict(
            {v.lower(): ASPP(width, cfg.aspp_channels, cfg.aspp_rates) for v in VIEW_IDS}
        )
        self.decoder = Decoder(len(VIEW_IDS) * width, cfg.decoder_channels, cfg.n_classes)
        self._pending: torch.Tensor | None = None
        self.reset_parameters(seed)

    @torch.no_grad()
    def reset_parameters(self, seed: int) -> None:
        """He-normal weights (fan-in), uniform(+-1/sqrt(fan_in)) biases; deterministic in ``seed``."""
        gen = torch.Generator().manual_seed(seed)
        for module in self.modules():
            if not isinstance(module, (nn.Conv2d, nn.Conv3d, nn.ConvTranspose2d)):
                continue
            w = module.weight
            if isinstance(module, nn.ConvTranspose2d):
                fan_in = w.shape[0] * math.prod(w.shape[2:])
            else:
                fan_in = math.prod(w.shape[1:])
            w.copy_(torch.randn(w.shape, generator=gen, dtype=torch.float64) * math.sqrt(2.0 / fan_in))
            bound = 1.0 / math.sqrt(fan_in)
            module.bias.copy_((torch.rand(module.bias.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)

    def _check(self, name: str, x: torch.Tensor) -> torch.Tensor:
        if self.debug and not torch.isfinite(x).all():
            raise FloatingPointError(f"non-finite values after {name}")
        return x

    def encode(self, views: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
        out = {}
        for vid in VIEW_IDS:
            if vid not in views:
                raise ShapeError(f"missing input view {vid}")
            key = vid.lower()
            f = self._check(f"encoder[{vid}]", self.encoders[key](views[vid]))
            out[vid] = self._check(f"aspp[{vid}]", self.aspp[key](f))
        return out

    def forward(self, views: Mapping[str, torch.Tensor]) -> torch.Tensor:
        """(B, T, rows, cols) per view -> (B, K, 4*latent) EA logits."""
        z = latent_fuse(self.encode(views), self.cfg.latent_size)
        return self._check("decoder", self.decoder(z))

    def predict_proba(self, views: Mapping[str, torch.Tensor]) -> torch.Tensor:
        return torch.softmax(self(views), dim=1)

    def forward_pass(self, views: Mapping[str, torch.Tensor]) -> torch.Tensor:
        """Probabilities, remembered for a following ``backward`` call."""
        probs = self.predict_proba(views)
        self._pending = probs
        return probs

    def backward(self, grad_probs: torch.Tensor) -> dict[str, torch.Tensor]:
        """Accumulate d(loss)/d(params) given d(loss)/d(probabilities) of the last forward pass."""
        if self._pending is None:
            raise RuntimeError("backward called without a preceding forward pass")
        probs, self._pending = self._pending, None
        probs.backward(grad_probs)
        return self.gradients()

    def gradients(self) -> dict[str, torch.Tensor]:
        return {
            n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
            for n, p in self.named_parameters()
        }

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


def to_tensors(window: Mapping[str, np.ndarray], dtype=torch.float32) -> dict[str, torch.Tensor]:
    """Numpy (T, r, c) or (B, T, r, c) arrays -> batched tensors."""
    out = {}
    for vid, arr in window.items():
        t = torch.as_tensor(np.ascontiguousarray(arr), dtype=dtype)
        out[vid] = t.unsqueeze(0) if t.dim() == 3 else t
    return out


# checkpoint format ---------------------------------------------------------

MAGIC = b"TMVA4DCK"
VERSION = 1


def save_checkpoint(model: TMVA4D, path: str | Path) -> None:
    cfg_blob = json.dumps(model.cfg.to_dict(), sort_keys=True).encode()
    params = list(model.state_dict().items())
    parts = [MAGIC, struct.pack("<I", VERSION), model.cfg.digest(),
             struct.pack("<I", len(cfg_blob)), cfg_blob, struct.pack("<I", len(params))]
    for name, t in params:
        nb = name.encode()
        arr = t.detach().cpu().numpy().astype("<f4")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def _read(buf: memoryview, off: int, n: int) -> tuple[bytes, int]:
    if off + n > len(buf):
        raise CheckpointError("truncated checkpoint")
    return bytes(buf[off:off + n]), off + n


def read_checkpoint(path: str | Path) -> tuple[NetworkConfig, dict[str, np.ndarray]]:
    buf = memoryview(Path(path).read_bytes())
    magic, off = _read(buf, 0, 8)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a TMVA4D checkpoint")
    raw, off = _read(buf, off, 4)
    (version,) = struct.unpack("<I", raw)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    digest, off = _read(buf, off, 32)
    raw, off = _read(buf, off, 4)
    blob, off = _read(buf, off, struct.unpack("<I", raw)[0])
    cfg = NetworkConfig.from_dict(json.loads(blob))
    if cfg.digest() != digest:
        raise CheckpointError(f"{path}: config digest does not match embedded config")
    raw, off = _read(buf, off, 4)
    params = {}
    for _ in range(struct.unpack("<I", raw)[0]):
        raw, off = _read(buf, off, 2)
        name, off = _read(buf, off, struct.unpack("<H", raw)[0])
        raw, off = _read(buf, off, 1)
        ndim = raw[0]
        raw, off = _read(buf, off, 4 * ndim)
        shape = struct.unpack(f"<{ndim}I", raw)
        data, off = _read(buf, off, 4 * math.prod(shape))
        params[name.decode()] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
    return cfg, params


def load_checkpoint(path: str | Path, expected: NetworkConfig | None = None) -> TMVA4D:
    cfg, params = read_checkpoint(path)
    if expected is not None and expected.digest() != cfg.digest():
        raise CheckpointError(f"{path}: checkpoint config does not match the requested network config")
    model = TMVA4D(cfg)
    state = model.state_dict()
    if set(state) != set(params):
        raise CheckpointError(f"{path}: parameter names do not match the architecture")
    for name, arr in params.items():
        if tuple(state[name].shape) != arr.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}")
    model.load_state_dict({k: torch.from_numpy(v) for k, v in params.items()})
    return model
