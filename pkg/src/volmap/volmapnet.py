"""Lightweight 3-level UNet over the volumetric BEV grid.

Encoder: three (conv-relu, conv-relu, maxpool) levels, a two-conv
bottleneck, a mirrored decoder that upsamples (nearest) and concatenates the
skip before two conv-relu, and a 1x1 head. Channel widths are
``base_channels * multipliers`` with the bottleneck at
``base_channels * bottleneck_multiplier``.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import nn
from .geometry import IGNORE_LABEL, PointCloud
from .voxelizer import GridConfig, VolGrid, backproject, crop, pad_and_crop, voxelize

log = logging.getLogger(__name__)

FORMAT_NAME = "volmap-params"
FORMAT_VERSION = 1
STRIDE = 8


@dataclass(frozen=True)
class NetConfig:
    in_channels: int
    n_classes: int
    base_channels: int = 16
    multipliers: tuple = (1, 2, 4)
    bottleneck_multiplier: int = 8

    def __post_init__(self):
        object.__setattr__(self, "multipliers", tuple(int(m) for m in self.multipliers))
        if len(self.multipliers) != 3:
            raise ValueError("the network has exactly three encoder levels")
        if min(self.in_channels, self.n_classes, self.base_channels, self.bottleneck_multiplier,
               *self.multipliers) < 1:
            raise ValueError("channel counts must be positive")

    def layer_specs(self) -> list[tuple[str, int, int, int]]:
        """(name, in_channels, out_channels, kernel) in forward order."""
        widths = [self.base_channels * m for m in self.multipliers]
        bott = self.base_channels * self.bottleneck_multiplier
        specs = []
        cin = self.in_channels
        for i, c in enumerate(widths, 1):
            specs += [(f"enc{i}a", cin, c, 3), (f"enc{i}b", c, c, 3)]
            cin = c
        specs += [("bott_a", cin, bott, 3), ("bott_b", bott, bott, 3)]
        cin = bott
        for i in (3, 2, 1):
            c = widths[i - 1]
            specs += [(f"dec{i}a", cin + c, c, 3), (f"dec{i}b", c, c, 3)]
            cin = c
        specs.append(("head", cin, self.n_classes, 1))
        return specs

    def to_json(self) -> dict:
        d = asdict(self)
        d["multipliers"] = list(self.multipliers)
        return d


@dataclass(eq=False)
class ModelParams:
    config: NetConfig
    layers: dict  # name -> nn.LayerParams, forward order
    version: int = FORMAT_VERSION
    meta: dict = field(default_factory=dict)

    def __iter__(self):
        return iter(self.layers.values())

    def zero_grad(self) -> None:
        for layer in self:
            layer.zero_grad()

    def copy(self) -> "ModelParams":
        layers = {k: nn.LayerParams(k, v.weight.copy(), v.bias.copy()) for k, v in self.layers.items()}
        return ModelParams(self.config, layers, self.version, json.loads(json.dumps(self.meta)))

    def tensors(self):
        """(name, array) pairs in storage order."""
        for name, layer in self.layers.items():
            yield f"{name}.weight", layer.weight
            yield f"{name}.bias", layer.bias


def init_params(cfg: NetConfig, seed: int = 0, dtype=np.float32, zero_head: bool = False) -> ModelParams:
    """He-normal weights and zero biases from a seeded generator."""
    rng = np.random.default_rng(seed)
    layers = {}
    for name, cin, cout, k in cfg.layer_specs():
        w = nn.he_normal(rng, cout, cin, k, dtype)
        if zero_head and name == "head":
            w[...] = 0
        layers[name] = nn.LayerParams(name, w, np.zeros(cout, dtype=dtype))
    return ModelParams(cfg, layers)


# -- forward / backward ----------------------------------------------------------

def _conv_relu(x, layer, caches):
    y, cc = nn.conv2d_forward(x, layer.weight, layer.bias)
    y, rc = nn.relu_forward(y)
    caches.append((layer, cc, rc))
    return y


def _conv_relu_back(d, caches):
    layer, cc, rc = caches.pop()
    d = nn.relu_backward(d, rc)
    dx, dw, db = nn.conv2d_backward(d, cc)
    layer.weight_grad += dw
    layer.bias_grad += db
    return dx


def _forward_padded(x: np.ndarray, params: ModelParams):
    L = params.layers
    caches: list = []
    skips = []
    pools = []
    h = x
    for i in (1, 2, 3):
        h = _conv_relu(h, L[f"enc{i}a"], caches)
        h = _conv_relu(h, L[f"enc{i}b"], caches)
        skips.append(h)
        h, pc = nn.maxpool2_forward(h)
        pools.append(pc)
    h = _conv_relu(h, L["bott_a"], caches)
    h = _conv_relu(h, L["bott_b"], caches)
    splits = []
    for i in (3, 2, 1):
        h, us = nn.upsample2_forward(h)
        h, split = nn.concat_forward(h, skips[i - 1])
        splits.append((us, split))
        h = _conv_relu(h, L[f"dec{i}a"], caches)
        h = _conv_relu(h, L[f"dec{i}b"], caches)
    logits, hc = nn.conv2d_forward(h, L["head"].weight, L["head"].bias)
    return logits, (caches, pools, splits, hc)


def _backward_padded(dlogits: np.ndarray, params: ModelParams, cache) -> np.ndarray:
    """Accumulate parameter gradients; returns the input gradient."""
    caches, pools, splits, hc = cache
    head = params.layers["head"]
    d, dw, db = nn.conv2d_backward(dlogits, hc)
    head.weight_grad += dw
    head.bias_grad += db
    dskips = {}
    for i in (1, 2, 3):
        d = _conv_relu_back(d, caches)
        d = _conv_relu_back(d, caches)
        us, split = splits.pop()
        d, dskips[i] = nn.concat_backward(d, split)
        d = nn.upsample2_backward(d, us)
    d = _conv_relu_back(d, caches)
    d = _conv_relu_back(d, caches)
    for i in (3, 2, 1):
        d = nn.maxpool2_backward(d, pools.pop()) + dskips[i]
        d = _conv_relu_back(d, caches)
        d = _conv_relu_back(d, caches)
    return d


def _check_input(x: np.ndarray, params: ModelParams) -> None:
    if x.ndim != 3 or x.shape[0] != params.config.in_channels:
        raise ValueError(f"expected [{params.config.in_channels}, H, W] input, got {x.shape}")


def forward(grid_values: np.ndarray, params: ModelParams) -> np.ndarray:
    """Logits [n_classes, H, W]; inputs are padded to multiples of 8 and cropped back."""
    _check_input(grid_values, params)
    dtype = params.layers["head"].weight.dtype
    x, rec = pad_and_crop(np.asarray(grid_values, dtype=dtype), STRIDE)
    logits, _ = _forward_padded(x, params)
    return crop(logits, rec)


def loss_and_grad(grid_values: np.ndarray, targets: np.ndarray, weights, params: ModelParams,
                  scale: float = 1.0) -> float:
    """Weighted CE for one sample; adds ``scale * dloss/dparam`` into the gradient buffers."""
    _check_input(grid_values, params)
    dtype = params.layers["head"].weight.dtype
    x, rec = pad_and_crop(np.asarray(grid_values, dtype=dtype), STRIDE)
    t = np.asarray(targets)
    if t.shape != grid_values.shape[1:]:
        raise ValueError(f"targets {t.shape} do not match input {grid_values.shape}")
    t = np.pad(t, [(0, x.shape[1] - t.shape[0]), (0, x.shape[2] - t.shape[1])],
               constant_values=IGNORE_LABEL)
    logits, cache = _forward_padded(x, params)
    loss, dlogits = nn.weighted_softmax_ce(logits, t, weights)
    if scale != 1.0:
        dlogits *= scale
    _backward_padded(dlogits.astype(dtype, copy=False), params, cache)
    return loss


# -- training --------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    lr: float = 1e-4
    batch_size: int = 16
    momentum: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr >= 0 required")


def train(dataset: Sequence, params: ModelParams, hyper: TrainConfig, weights,
          progress=None) -> tuple[ModelParams, list[float]]:
    """Minibatch SGD over shuffled samples; returns trained params and per-epoch mean loss.

    ``dataset`` holds (grid, cell targets) pairs where grid is a
    :class:`VolGrid` or its values array. ``params`` is updated in place.
    ``progress(epoch, loss)`` is called after every epoch; returning True
    ends training early.
    """
    if not dataset:
        raise ValueError("empty training set")
    samples = []
    for grid, target in dataset:
        values = grid.values if isinstance(grid, VolGrid) else np.asarray(grid)
        samples.append((values, np.asarray(target)))
    rng = np.random.default_rng(hyper.seed)
    opt = nn.SGD(hyper.lr, hyper.momentum)
    params.zero_grad()
    history = []
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(samples))
        total = 0.0
        for start in range(0, len(order), hyper.batch_size):
            batch = order[start:start + hyper.batch_size]
            for i in batch:
                values, target = samples[i]
                total += loss_and_grad(values, target, weights, params, scale=1.0 / len(batch))
            opt.step(params)
        history.append(total / len(samples))
        if progress is not None and progress(epoch, history[-1]):
            break
    return params, history


# -- inference -------------------------------------------------------------------

def predict_cells(grid_values: np.ndarray, params: ModelParams) -> np.ndarray:
    """Argmax class per cell; ties resolve to the lowest class id."""
    return forward(grid_values, params).argmax(axis=0).astype(np.int32)


def infer(cloud: PointCloud, params: ModelParams, grid_cfg: GridConfig) -> PointCloud:
    """voxelize -> pad -> forward -> argmax -> crop -> backproject."""
    if grid_cfg.n_layers != params.config.in_channels:
        raise ValueError("grid layer count does not match the network input channels")
    grid = voxelize(cloud, grid_cfg)
    cells = predict_cells(grid.values, params)
    return backproject(cells, grid, cloud)


# -- serialization ---------------------------------------------------------------

_LEN = struct.Struct("<Q")


def _manifest(params: ModelParams) -> dict:
    tensors, offset = [], 0
    for name, arr in params.tensors():
        nbytes = int(arr.size) * 4
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": "<f4",
                        "offset": offset, "nbytes": nbytes})
        offset += nbytes
    return {"format": FORMAT_NAME, "version": params.version, "config": params.config.to_json(),
            "meta": params.meta, "tensors": tensors}


def save(params: ModelParams, path) -> None:
    """Length-prefixed JSON manifest followed by raw little-endian float32 blobs."""
    manifest = json.dumps(_manifest(params), sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(_LEN.pack(len(manifest)))
        f.write(manifest)
        for _, arr in params.tensors():
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load(path) -> ModelParams:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _LEN.size:
        raise ValueError(f"{path}: not a weight file")
    (mlen,) = _LEN.unpack_from(raw)
    try:
        manifest = json.loads(raw[_LEN.size:_LEN.size + mlen])
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise ValueError(f"{path}: unreadable manifest") from None
    if manifest.get("format") != FORMAT_NAME:
        raise ValueError(f"{path}: not a {FORMAT_NAME} file")
    if manifest.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {manifest.get('version')}")
    cfg = NetConfig(**manifest["config"])
    blob = raw[_LEN.size + mlen:]
    arrays = {}
    for t in manifest["tensors"]:
        expected = int(np.prod(t["shape"])) * 4
        if t["nbytes"] != expected:
            raise ValueError(f"{path}: tensor {t['name']} shape {t['shape']} needs {expected} bytes, "
                             f"manifest says {t['nbytes']}")
        chunk = blob[t["offset"]:t["offset"] + expected]
        if len(chunk) != expected:
            raise ValueError(f"{path}: tensor {t['name']} is truncated")
        arrays[t["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(t["shape"]).astype(np.float32)
    if sum(t["nbytes"] for t in manifest["tensors"]) != len(blob):
        raise ValueError(f"{path}: blob length does not match the manifest")
    layers = {}
    for name, cin, cout, k in cfg.layer_specs():
        try:
            w, b = arrays[f"{name}.weight"], arrays[f"{name}.bias"]
        except KeyError as exc:
            raise ValueError(f"{path}: missing tensor {exc.args[0]}") from None
        if w.shape != (cout, cin, k, k) or b.shape != (cout,):
            raise ValueError(f"{path}: tensor shapes for {name} do not match the network config")
        layers[name] = nn.LayerParams(name, w, b)
    return ModelParams(cfg, layers, manifest["version"], manifest.get("meta", {}))
