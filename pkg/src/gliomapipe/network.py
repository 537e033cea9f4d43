"""Three-level encoder/decoder FCN with dense encoder modules.

Layout (channels for the default widths)::

    input (4) -> dense(64) -> pool -> dense(128) -> pool -> dense(256)
                   |                    |                      |
                   |                    +-- concat <- up+conv(128)
                   |                          conv x2 (128)
                   +---------- concat <- up+conv(64)
                                conv x2 (64) -> 1x1 conv -> sigmoid

Tensors at the public boundary are channels-last, ``(batch, H, W, C)``.
"""

from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from types import MappingProxyType

import numpy as np
import torch
import torch.nn.functional as F
from safetensors import SafetensorError
from safetensors.numpy import load as st_load
from safetensors.numpy import save as st_save
from torch import nn

from .errors import IncompatibleWeights, IoError, ShapeError

META_KEY = "gliomapipe"


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple = (240, 240, 4)
    encoder_maps: tuple = (64, 128, 256)
    decoder_maps: tuple = (128, 64)
    dense_block_depth: int = 3
    kernel_size: int = 3

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "encoder_maps", tuple(int(v) for v in self.encoder_maps))
        object.__setattr__(self, "decoder_maps", tuple(int(v) for v in self.decoder_maps))
        h, w, c = self.input_shape
        if c != 4:
            raise ShapeError(f"input must have 4 modality channels, got {c}")
        if h % 4 or w % 4:
            raise ShapeError(f"H and W must be divisible by 4 for two pooling stages, got {h}x{w}")
        enc, dec = self.encoder_maps, self.decoder_maps
        if len(enc) != 3 or any(a >= b for a, b in zip(enc, enc[1:])) or enc[0] < 1:
            raise ValueError(f"encoder_maps must be 3 strictly increasing widths, got {enc}")
        if dec != (enc[1], enc[0]):
            raise ValueError(f"decoder_maps must mirror encoder levels 2 and 1, got {dec}")
        if self.dense_block_depth < 1:
            raise ValueError("dense_block_depth must be >= 1")
        if self.kernel_size != 3:
            raise ValueError("only 3x3 kernels are supported")

    def with_input(self, height: int, width: int) -> "NetworkSpec":
        return NetworkSpec((height, width, 4), self.encoder_maps, self.decoder_maps, self.dense_block_depth)

    def fingerprint(self) -> str:
        """Hash of everything that decides parameter names and shapes.

        Spatial input size is excluded: the network is fully convolutional.
        """
        payload = asdict(self)
        payload.pop("input_shape")
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _conv(in_ch, out_ch, kernel=3):
    return nn.Conv2d(in_ch, out_ch, kernel, padding=kernel // 2)


class DenseModule(nn.Module):
    """Densely connected 3x3 convolutions followed by a 1x1 projection."""

    def __init__(self, in_channels: int, out_channels: int, depth: int):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.growth = max(out_channels // depth, 1)
        self.layers = nn.ModuleList(
            _conv(in_channels + k * self.growth, self.growth) for k in range(depth)
        )
        self.transition = _conv(in_channels + depth * self.growth, out_channels, kernel=1)

    def forward(self, x):
        features = [x]
        for layer in self.layers:
            features.append(F.relu(layer(torch.cat(features, dim=1))))
        return F.relu(self.transition(torch.cat(features, dim=1)))


class ConvModule(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.conv1 = _conv(in_channels, out_channels)
        self.conv2 = _conv(out_channels, out_channels)

    def forward(self, x):
        return F.relu(self.conv2(F.relu(self.conv1(x))))


class UpStep(nn.Module):
    """Nearest-neighbour 2x upsampling followed by a 3x3 convolution."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = _conv(in_channels, out_channels)

    def forward(self, x):
        return F.relu(self.conv(F.interpolate(x, scale_factor=2, mode="nearest")))


class Network(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        e1, e2, e3 = spec.encoder_maps
        d1, d2 = spec.decoder_maps
        depth = spec.dense_block_depth
        self.enc1 = DenseModule(4, e1, depth)
        self.enc2 = DenseModule(e1, e2, depth)
        self.enc3 = DenseModule(e2, e3, depth)
        self.up1 = UpStep(e3, d1)
        self.dec1 = ConvModule(d1 + e2, d1)
        self.up2 = UpStep(d1, d2)
        self.dec2 = ConvModule(d2 + e1, d2)
        self.head = _conv(d2, 1, kernel=1)

    def forward(self, x):
        """``x``: (b, H, W, 4) -> (b, H, W, 1) probabilities."""
        x = x.permute(0, 3, 1, 2)
        s1 = self.enc1(x)
        s2 = self.enc2(F.max_pool2d(s1, 2))
        bottom = self.enc3(F.max_pool2d(s2, 2))
        y = self.dec1(torch.cat([self.up1(bottom), s2], dim=1))
        y = self.dec2(torch.cat([self.up2(y), s1], dim=1))
        return torch.sigmoid(self.head(y)).permute(0, 2, 3, 1)

    def dense_modules(self) -> list[DenseModule]:
        return [self.enc1, self.enc2, self.enc3]

    def conv_modules(self) -> list[ConvModule]:
        return [self.dec1, self.dec2]

    def channel_progression(self) -> list[int]:
        return [m.out_channels for m in self.dense_modules() + self.conv_modules()]

    def layer_metadata(self) -> list[dict]:
        """Per-convolution (module, name, in, out) records in forward order."""
        rows = []
        for mod_name, module in self.named_children():
            for name, layer in module.named_modules():
                if isinstance(layer, nn.Conv2d):
                    full = f"{mod_name}.{name}" if name else mod_name
                    rows.append(
                        {"module": mod_name, "name": full,
                         "in_channels": layer.in_channels, "out_channels": layer.out_channels}
                    )
        return rows


def build_network(spec: NetworkSpec, seed: int = 0) -> Network:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = Network(spec)
    return net


def _as_batch(network: Network, batch) -> torch.Tensor:
    param = next(network.parameters())
    batch = torch.as_tensor(batch, dtype=param.dtype)
    h, w, c = network.spec.input_shape
    if batch.ndim != 4 or batch.shape[-1] != c:
        raise ShapeError(f"expected (b, H, W, {c}) batch, got {tuple(batch.shape)}")
    if batch.shape[1] % 4 or batch.shape[2] % 4:
        raise ShapeError(f"spatial size {tuple(batch.shape[1:3])} not divisible by 4")
    return batch


def forward(network: Network, batch, spatial_check: bool = True) -> torch.Tensor:
    """Run the network on a channels-last batch; gradients are kept."""
    batch = _as_batch(network, batch)
    h, w, _ = network.spec.input_shape
    if spatial_check and tuple(batch.shape[1:3]) != (h, w):
        raise ShapeError(f"batch spatial shape {tuple(batch.shape[1:3])} != spec {(h, w)}")
    return network(batch)


def predict(network: Network, images, batch_size: int = 8) -> np.ndarray:
    """Probabilities for ``(N, H, W, 4)`` images as an ``(N, H, W)`` float32 array."""
    network.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = _as_batch(network, images[start:start + batch_size])
            out.append(network(chunk)[..., 0].float().numpy())
    if not out:
        return np.zeros((0,) + tuple(np.shape(images)[1:3]), dtype=np.float32)
    return np.concatenate(out)


@dataclass(frozen=True)
class WeightSet:
    """Named float32 parameter arrays plus the fingerprint of the spec that made them."""

    tensors: MappingProxyType
    fingerprint: str
    metadata: MappingProxyType = field(default_factory=lambda: MappingProxyType({}))

    def __post_init__(self):
        frozen = OrderedDict()
        for name, value in self.tensors.items():
            arr = np.array(value, dtype=np.float32, copy=True)
            arr.setflags(write=False)
            frozen[name] = arr
        object.__setattr__(self, "tensors", MappingProxyType(frozen))
        object.__setattr__(self, "metadata", MappingProxyType(dict(self.metadata)))

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    def shapes(self) -> dict[str, tuple]:
        return {k: v.shape for k, v in self.tensors.items()}

    def checksum(self) -> str:
        h = hashlib.sha256(self.fingerprint.encode())
        for name, arr in self.tensors.items():
            h.update(name.encode())
            h.update(str(arr.shape).encode())
            h.update(arr.astype("<f4").tobytes())
        return h.hexdigest()

    def equals(self, other: "WeightSet") -> bool:
        return (
            self.fingerprint == other.fingerprint
            and self.names == other.names
            and all(np.array_equal(self.tensors[k], other.tensors[k]) for k in self.names)
        )

    def with_metadata(self, **extra) -> "WeightSet":
        return WeightSet(self.tensors, self.fingerprint, {**self.metadata, **extra})


def get_weights(network: Network) -> WeightSet:
    tensors = OrderedDict(
        (name, p.detach().to(torch.float32).cpu().numpy()) for name, p in network.named_parameters()
    )
    return WeightSet(tensors, network.spec.fingerprint())


def set_weights(network: Network, weights: WeightSet) -> None:
    if weights.fingerprint != network.spec.fingerprint():
        raise IncompatibleWeights(
            f"weights built for spec {weights.fingerprint}, network is {network.spec.fingerprint()}"
        )
    params = dict(network.named_parameters())
    if list(params) != weights.names:
        missing = set(params) ^ set(weights.names)
        raise IncompatibleWeights(f"parameter names differ: {sorted(missing)[:5]}")
    for name, param in params.items():
        value = weights.tensors[name]
        if tuple(param.shape) != value.shape:
            raise IncompatibleWeights(f"{name}: shape {value.shape} != {tuple(param.shape)}")
    with torch.no_grad():
        for name, param in params.items():
            param.copy_(torch.from_numpy(np.array(weights.tensors[name])).to(param.dtype))


def save_weights(weights: WeightSet, path) -> Path:
    """Write a safetensors file; names, order, fingerprint and metadata go in one JSON header entry."""
    path = Path(path)
    meta = {"fingerprint": weights.fingerprint, "order": weights.names, "extra": dict(weights.metadata)}
    blob = st_save(
        {k: np.ascontiguousarray(v, dtype="<f4") for k, v in weights.tensors.items()},
        metadata={META_KEY: json.dumps(meta, sort_keys=True)},
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return path


def load_weights(path) -> WeightSet:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read weights {path}: {exc}") from exc
    try:
        tensors = st_load(blob)
        header_len = int.from_bytes(blob[:8], "little")
        header = json.loads(blob[8:8 + header_len])
        meta = json.loads(header["__metadata__"][META_KEY])
        ordered = OrderedDict((name, tensors[name]) for name in meta["order"])
    except (SafetensorError, ValueError, KeyError, TypeError) as exc:
        raise IoError(f"corrupt weight file {path}: {exc}") from exc
    return WeightSet(ordered, meta["fingerprint"], meta.get("extra", {}))


def network_from_weights(weights: WeightSet, spec: NetworkSpec) -> Network:
    net = build_network(spec, seed=0)
    set_weights(net, weights)
    return net
