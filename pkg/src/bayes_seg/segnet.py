"""Tiny encoder-decoder segmentation networks with stochastic-layer placement.

The encoder has ``depth`` stages of ``conv-relu-conv-relu-avgpool``; stage ``k``
has ``base_channels * 2**k`` channels. Three decoder styles sit on top:

``unet_concat``
    upsample, concatenate the matching encoder feature, two convs.
``linknet_add``
    upsample, conv, add the matching encoder feature, conv.
``fpn_pyramid``
    1x1 lateral convs with top-down nearest-2x additions, one conv per
    pyramid level, all levels upsampled to full size and concatenated, then a
    merge conv.

The head is a 1x1 convolution followed by a sigmoid, read as a per-pixel
Bernoulli probability.

Stochastic placement:

``backbone_output``  the conv producing the deepest encoder feature (1 layer)
``final_block``      every conv of the deepest encoder stage (2 layers)
``per_decoder``      the last conv of every decoder stage (``depth`` layers)
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .variational import Conv2d, ForwardContext, MnfConv2d, ReparamConv2d

DECODER_STYLES = ("unet_concat", "linknet_add", "fpn_pyramid")
STOCHASTIC_KINDS = ("deterministic", "reparam", "mnf")
PLACEMENTS = ("backbone_output", "final_block", "per_decoder")


class ConfigError(ValueError):
    pass


@dataclass
class ArchitectureConfig:
    decoder_style: str = "unet_concat"
    depth: int = 3
    base_channels: int = 8
    stochastic_kind: str = "deterministic"
    placement: str = "backbone_output"
    input_size: int = 64
    in_channels: int = 3
    sigma0: float = 1e-3
    flow_steps: int = 2
    flow_hidden: int = 16

    def validate(self):
        if self.decoder_style not in DECODER_STYLES:
            raise ConfigError(f"decoder_style must be one of {DECODER_STYLES}, got {self.decoder_style!r}")
        if self.stochastic_kind not in STOCHASTIC_KINDS:
            raise ConfigError(f"stochastic_kind must be one of {STOCHASTIC_KINDS}, got {self.stochastic_kind!r}")
        if self.placement not in PLACEMENTS:
            raise ConfigError(f"placement must be one of {PLACEMENTS}, got {self.placement!r}")
        if self.depth < 1 or self.base_channels < 1:
            raise ConfigError("depth and base_channels must be positive")
        if self.input_size % (2 ** self.depth):
            raise ConfigError(f"input_size {self.input_size} is not divisible by 2**depth = {2 ** self.depth}")
        return self


class SegModel:
    """Holds named layers and runs them for one of the three decoder styles."""

    def __init__(self, config: ArchitectureConfig, layers: dict):
        self.config = config
        self.layers = layers

    # -- inspection
    @property
    def stochastic_layers(self) -> list:
        return [name for name, layer in self.layers.items() if layer.stochastic]

    def named_parameters(self) -> dict:
        out = {}
        for lname, layer in self.layers.items():
            for pname, p in layer.parameters().items():
                out[f"{lname}.{pname}"] = p
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    # -- forward passes
    def _conv(self, name, x, ctx):
        return self.layers[name](x, ctx)

    def _block(self, prefix, x, ctx):
        x = T.relu(self._conv(f"{prefix}.conv1", x, ctx))
        return T.relu(self._conv(f"{prefix}.conv2", x, ctx))

    def run(self, x, ctx: ForwardContext) -> Tensor:
        cfg = self.config
        x = T.as_tensor(x)
        expect = (cfg.in_channels, cfg.input_size, cfg.input_size)
        if x.ndim != 4 or x.shape[1:] != expect:
            raise T.ShapeError(f"batch shape {x.shape} does not match (N, {expect[0]}, {expect[1]}, {expect[2]})")
        skips = []
        for k in range(cfg.depth):
            x = self._block(f"enc{k}", x, ctx)
            skips.append(x)
            x = T.avg_pool2x2(x)

        style = cfg.decoder_style
        if style == "fpn_pyramid":
            p = self._conv("lat_top", x, ctx)
            levels = []
            for k in reversed(range(cfg.depth)):
                p = self._conv(f"lat{k}", skips[k], ctx) + T.upsample_nearest2x(p)
                q = T.relu(self._conv(f"dec{k}.conv2", p, ctx))
                for _ in range(k):
                    q = T.upsample_nearest2x(q)
                levels.append(q)
            x = T.relu(self._conv("merge", T.concat(levels, axis=1), ctx))
        else:
            for k in reversed(range(cfg.depth)):
                up = T.upsample_nearest2x(x)
                if style == "unet_concat":
                    x = T.relu(self._conv(f"dec{k}.conv1", T.concat([up, skips[k]], axis=1), ctx))
                else:
                    x = T.relu(self._conv(f"dec{k}.conv1", up, ctx)) + skips[k]
                x = T.relu(self._conv(f"dec{k}.conv2", x, ctx))
        return T.sigmoid(self._conv("head", x, ctx))

    def __call__(self, x, ctx: ForwardContext) -> Tensor:
        return self.run(x, ctx)


def _channels(cfg, k):
    return cfg.base_channels * 2 ** k


def stochastic_slots(cfg: ArchitectureConfig) -> set:
    if cfg.stochastic_kind == "deterministic":
        return set()
    last = cfg.depth - 1
    if cfg.placement == "backbone_output":
        return {f"enc{last}.conv2"}
    if cfg.placement == "final_block":
        return {f"enc{last}.conv1", f"enc{last}.conv2"}
    return {f"dec{k}.conv2" for k in range(cfg.depth)}


def build_model(config: ArchitectureConfig, rng) -> SegModel:
    cfg = config.validate()
    slots = stochastic_slots(cfg)

    def conv(name, cin, cout, k=3):
        if name not in slots:
            return Conv2d(cin, cout, k, rng)
        if cfg.stochastic_kind == "reparam":
            return ReparamConv2d(cin, cout, k, rng, sigma0=cfg.sigma0)
        return MnfConv2d(cin, cout, k, rng, sigma0=cfg.sigma0, flow_steps=cfg.flow_steps,
                         flow_hidden=cfg.flow_hidden, aux_hidden=cfg.flow_hidden, z_sigma0=cfg.sigma0)

    layers = {}
    cin = cfg.in_channels
    for k in range(cfg.depth):
        c = _channels(cfg, k)
        layers[f"enc{k}.conv1"] = conv(f"enc{k}.conv1", cin, c)
        layers[f"enc{k}.conv2"] = conv(f"enc{k}.conv2", c, c)
        cin = c

    deepest = _channels(cfg, cfg.depth - 1)
    if cfg.decoder_style == "fpn_pyramid":
        pc = 2 * cfg.base_channels
        layers["lat_top"] = conv("lat_top", deepest, pc, 1)
        for k in reversed(range(cfg.depth)):
            layers[f"lat{k}"] = conv(f"lat{k}", _channels(cfg, k), pc, 1)
            layers[f"dec{k}.conv2"] = conv(f"dec{k}.conv2", pc, pc)
        layers["merge"] = conv("merge", pc * cfg.depth, pc)
        out_c = pc
    else:
        x_c = deepest
        for k in reversed(range(cfg.depth)):
            c = _channels(cfg, k)
            c_in = x_c + c if cfg.decoder_style == "unet_concat" else x_c
            layers[f"dec{k}.conv1"] = conv(f"dec{k}.conv1", c_in, c)
            layers[f"dec{k}.conv2"] = conv(f"dec{k}.conv2", c, c)
            x_c = c
        out_c = x_c
    layers["head"] = conv("head", out_c, 1, 1)
    return SegModel(cfg, layers)


def forward_stochastic(model: SegModel, batch, rng) -> tuple[Tensor, Tensor]:
    """One weight sample per stochastic layer; returns ``(probs, summed KL)``."""
    ctx = ForwardContext(mode="sample", rng=rng)
    probs = model.run(batch, ctx)
    kl = Tensor(0.0)
    for term in ctx.kl_terms:
        kl = kl + term
    return probs, kl


def forward_mean(model: SegModel, batch) -> Tensor:
    """Deterministic pass with posterior means (MNF layers use ``z = f(E[z0])``)."""
    return model.run(batch, ForwardContext(mode="mean", collect_kl=False))


# ----------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"BSEGCKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: SegModel, extra: dict | None = None):
    """Write ``magic | u32 version | u32 header length | JSON header | f64 blocks``.

    The header holds the architecture config, optional extra metadata and, for
    each parameter block, its name, shape and byte offset into the data section.
    """
    blocks = []
    offset = 0
    params = model.named_parameters()
    for name, p in params.items():
        nbytes = p.data.size * 8
        blocks.append({"name": name, "shape": list(p.shape), "offset": offset})
        offset += nbytes
    header = {"architecture": asdict(model.config), "extra": extra or {}, "blocks": blocks}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for p in params.values():
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def read_checkpoint(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint schema version {version} (expected {CKPT_VERSION})")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    data = raw[16 + hlen:]
    arrays = {}
    for blk in header["blocks"]:
        n = int(np.prod(blk["shape"])) if blk["shape"] else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=blk["offset"])
        arrays[blk["name"]] = arr.reshape(blk["shape"]).astype(np.float64)
    return header, arrays


def load_checkpoint(path) -> tuple[SegModel, dict]:
    header, arrays = read_checkpoint(path)
    cfg = ArchitectureConfig(**header["architecture"])
    model = build_model(cfg, np.random.default_rng(0))
    params = model.named_parameters()
    if set(params) != set(arrays):
        missing = sorted(set(params) ^ set(arrays))
        raise CheckpointError(f"{path}: parameter blocks do not match architecture: {missing[:5]}")
    for name, p in params.items():
        if p.shape != arrays[name].shape:
            raise CheckpointError(f"{path}: block {name} has shape {arrays[name].shape}, expected {p.shape}")
        p.data = arrays[name]
    return model, header.get("extra", {})
