import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from ..models import InvalidArgumentError, Mechanism, ShapeError, UnsupportedMechanismError
from . import attention
from .kernels import Tensor, as_tensor, bias_add, concat, conv2d, max_pool2x, no_grad, parameter, relu, upsample2x

logger = logging.getLogger(__name__)


class AttentionConfig(BaseModel):
    mechanism: Mechanism = Mechanism.GCA
    windows: Dict[int, int] = {16: 7, 8: 5, 4: 3}    # resolution -> LCA window
    heads: int = 8
    positional_encoding: bool = True

    @field_validator("windows")
    @classmethod
    def _odd_windows(cls, value):
        for res, k in value.items():
            if k < 1 or k % 2 == 0:
                raise ValueError(f"window at {res}x{res} must be odd and >= 1, got {k}")
        return value


class ArchConfig(BaseModel):
    input_size: int = 64
    in_channels: int = 3
    encoder_widths: List[int] = [16, 32, 64, 128]
    attention_resolutions: List[int] = [16, 8, 4]
    attention: AttentionConfig = AttentionConfig()
    decoder_widths: List[int] = [64, 32, 16, 16]
    head_width: int = 16
    num_classes: int = Field(default=2, ge=2, le=2)

    @model_validator(mode="after")
    def _consistent(self):
        stages = len(self.encoder_widths)
        if self.input_size % (2 ** stages):
            raise ValueError(f"input size {self.input_size} is not divisible by 2^{stages}")
        if len(self.decoder_widths) != stages:
            raise ValueError("one decoder width per encoder stage")
        resolutions = self.stage_resolutions()
        for res in self.attention_resolutions:
            if res not in resolutions:
                raise ValueError(f"attention resolution {res} is not an encoder output resolution {resolutions}")
            channels = self.encoder_widths[resolutions.index(res)]
            if self.attention.mechanism == Mechanism.GCA_MSA:
                if channels % self.attention.heads:
                    raise ValueError(f"{self.attention.heads} heads do not divide {channels} channels at {res}x{res}")
                if self.attention.positional_encoding and channels % 4:
                    raise ValueError(f"positional encoding needs channels divisible by 4 at {res}x{res}")
            if self.attention.mechanism == Mechanism.LCA and res not in self.attention.windows:
                raise ValueError(f"no LCA window configured for {res}x{res}")
        return self

    def stage_resolutions(self) -> List[int]:
        return [self.input_size // 2 ** (i + 1) for i in range(len(self.encoder_widths))]

    def ordered_attention_resolutions(self) -> List[int]:
        """Finest first; index 0 is the attention level closest to the input."""
        return sorted(self.attention_resolutions, reverse=True)

    @classmethod
    def for_mechanism(cls, mechanism: Union[Mechanism, str], **overrides) -> "ArchConfig":
        mechanism = Mechanism.parse(mechanism) if isinstance(mechanism, str) else mechanism
        attn = AttentionConfig(**{**overrides.pop("attention", {}), "mechanism": mechanism})
        return cls(attention=attn, **overrides)


def _conv_param(rng: np.random.Generator, out_c: int, in_c: int, k: int, dtype) -> Tensor:
    std = math.sqrt(2.0 / (in_c * k * k))
    return parameter(rng.normal(0.0, std, size=(out_c, in_c, k, k)).astype(dtype))


@dataclass
class ConvLayer:
    weight: Tensor
    bias: Tensor

    def __call__(self, x: Tensor, stride: int = 1) -> Tensor:
        return bias_add(conv2d(x, self.weight, stride=stride), self.bias)


class StateDiffNet:
    """
    Siamese encoder shared by anchor and sample, fusion skips at the attention
    resolutions, a U-Net style decoder on the anchor branch only, and a
    two-layer segmentation head.
    """

    def __init__(self, arch: ArchConfig, rng: np.random.Generator, dtype=np.float32):
        self.arch = arch
        self.dtype = np.dtype(dtype)
        self.mechanism = arch.attention.mechanism
        widths = arch.encoder_widths
        resolutions = arch.stage_resolutions()

        def conv(out_c, in_c, k):
            return ConvLayer(_conv_param(rng, out_c, in_c, k, self.dtype), parameter(np.zeros(out_c, dtype=self.dtype)))

        # 1. Encoder: conv3x3 -> ReLU -> 2x max-pool per stage
        self.encoder: List[ConvLayer] = []
        prev = arch.in_channels
        for width in widths:
            self.encoder.append(conv(width, prev, 3))
            prev = width

        # 2. Self-attention blocks (gca_msa only), shared between both branches
        self.self_attention: Dict[int, attention.SelfAttentionParams] = {}
        if self.mechanism == Mechanism.GCA_MSA:
            for res in arch.ordered_attention_resolutions():
                channels = widths[resolutions.index(res)]
                self.self_attention[res] = attention.SelfAttentionParams.create(channels, rng, self.dtype)

        # 3. Decoder, coarsest stage first
        self.decoder: List[ConvLayer] = []
        up_channels = 0
        for stage in reversed(range(len(widths))):
            skip_c = self.skip_channels(stage)
            out_c = arch.decoder_widths[len(widths) - 1 - stage]
            self.decoder.append(conv(out_c, up_channels + skip_c, 3))
            up_channels = out_c

        # 4. Head
        self.head_hidden = conv(arch.head_width, up_channels, 3)
        self.head_out = conv(arch.num_classes, arch.head_width, 1)

    # --- Parameters ---

    def skip_channels(self, stage: int) -> int:
        width = self.arch.encoder_widths[stage]
        res = self.arch.stage_resolutions()[stage]
        return 2 * width if res in self.arch.attention_resolutions else width

    def named_parameters(self) -> Dict[str, Tensor]:
        named: Dict[str, Tensor] = {}
        for i, layer in enumerate(self.encoder):
            named[f"encoder.{i}.weight"] = layer.weight
            named[f"encoder.{i}.bias"] = layer.bias
        for res, block in self.self_attention.items():
            named.update(block.named(f"msa.{res}"))
        for i, layer in enumerate(self.decoder):
            named[f"decoder.{i}.weight"] = layer.weight
            named[f"decoder.{i}.bias"] = layer.bias
        named["head.0.weight"] = self.head_hidden.weight
        named["head.0.bias"] = self.head_hidden.bias
        named["head.1.weight"] = self.head_out.weight
        named["head.1.bias"] = self.head_out.bias
        return named

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    # --- Forward ---

    def encode(self, x: Tensor) -> List[Tensor]:
        features = []
        for layer in self.encoder:
            x = max_pool2x(relu(layer(x)))
            features.append(x)
        return features

    def fuse(self, f1: Tensor, f2: Tensor, res: int) -> Tuple[Tensor, Tensor]:
        """Skip tensor at an attention resolution, plus the attended part alone."""
        mech = self.mechanism
        if mech == Mechanism.CONCAT_ONLY:
            return concat([f1, f2], axis=1), f2
        if mech == Mechanism.GCA_MSA:
            block = self.self_attention[res]
            heads = self.arch.attention.heads
            pe = self.arch.attention.positional_encoding
            f1 = attention.linear_self_attention(f1, block, heads, pe)
            f2 = attention.linear_self_attention(f2, block, heads, pe)
        if mech == Mechanism.LCA:
            attended = attention.cross_attend_local(f1, f2, self.arch.attention.windows[res])
        else:
            attended = attention.cross_attend_global(f1, f2)
        return concat([f1, attended], axis=1), attended

    def _check_inputs(self, anchor: Tensor, sample: Tensor):
        size = self.arch.input_size
        expected = (self.arch.in_channels, size, size)
        for t in (anchor, sample):
            if t.ndim != 4 or t.shape[1:] != expected:
                raise ShapeError("StateDiffNet.forward", t.shape, (None,) + expected)
        if anchor.shape != sample.shape:
            raise ShapeError("StateDiffNet.forward", anchor.shape, sample.shape)

    def forward(self, anchor: Union[Tensor, np.ndarray], sample: Union[Tensor, np.ndarray],
                taps: Optional[Dict[str, Tensor]] = None) -> Tensor:
        """
        Logits (N, 2, H, W) for image batches (N, 3, H, W) in [0, 1]. When
        taps is a dict it receives the skip and attended tensors per resolution.
        """
        anchor, sample = as_tensor(anchor), as_tensor(sample)
        self._check_inputs(anchor, sample)
        f1s, f2s = self.encode(anchor), self.encode(sample)

        skips = []
        for stage, (f1, f2) in enumerate(zip(f1s, f2s)):
            res = self.arch.stage_resolutions()[stage]
            if res in self.arch.attention_resolutions:
                skip, attended = self.fuse(f1, f2, res)
                if taps is not None:
                    taps[f"attended.{res}"] = attended
            else:
                skip = f1
            if taps is not None:
                taps[f"skip.{res}"] = skip
            skips.append(skip)

        x = None
        for layer, skip in zip(self.decoder, reversed(skips)):
            x = skip if x is None else concat([x, skip], axis=1)
            x = upsample2x(relu(layer(x)))
        return self.head_out(relu(self.head_hidden(x)))

    __call__ = forward

    def predict(self, anchor: np.ndarray, sample: np.ndarray) -> np.ndarray:
        """Binary masks (N, H, W); class 1 is change."""
        with no_grad():
            logits = self.forward(anchor, sample).data
        return (logits[:, 1] > logits[:, 0]).astype(np.uint8)

    def load_state(self, tensors: Dict[str, np.ndarray]):
        named = self.named_parameters()
        missing = set(named) - set(tensors)
        if missing:
            raise InvalidArgumentError(f"checkpoint lacks tensors: {sorted(missing)}")
        for name, t in named.items():
            value = tensors[name]
            if value.shape != t.shape:
                raise ShapeError(f"load {name}", value.shape, t.shape)
            t.data = value.astype(self.dtype, copy=True)


def build_model(arch: ArchConfig, rng: Union[np.random.Generator, int], dtype=np.float32) -> StateDiffNet:
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    model = StateDiffNet(arch, rng, dtype)
    logger.info(f"Built {arch.attention.mechanism.value} model with {model.parameter_count()} parameters")
    return model


def to_input(rgb: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(H, W, 3) uint8 -> (3, H, W) in [0, 1]."""
    return (np.asarray(rgb, dtype=dtype) / 255.0).transpose(2, 0, 1)


def stack_inputs(images: Sequence[np.ndarray], dtype=np.float32) -> np.ndarray:
    return np.stack([to_input(img, dtype) for img in images]).astype(dtype, copy=False)


# --- Attention extraction ---

@dataclass
class AttentionMap:
    weights: np.ndarray       # (h, w) at the attention resolution, sums to 1
    heatmap: np.ndarray       # (S, S) upsampled, scaled to [0, 1]
    resolution: int
    query_cell: Tuple[int, int]   # (x, y) in the attention grid


def extract_attention(model: StateDiffNet, anchor_rgb: np.ndarray, sample_rgb: np.ndarray,
                      level: int, query: Tuple[int, int]) -> AttentionMap:
    """
    Attention row of the anchor pixel query = (x, y) over the sample at the
    chosen attention level (0 = finest).
    """
    mech = model.mechanism
    if mech == Mechanism.CONCAT_ONLY:
        raise UnsupportedMechanismError("concat_only models have no attention weights")
    levels = model.arch.ordered_attention_resolutions()
    if not 0 <= level < len(levels):
        raise InvalidArgumentError(f"level must lie in [0, {len(levels) - 1}], got {level}")
    size = model.arch.input_size
    qx, qy = query
    if not (0 <= qx < size and 0 <= qy < size):
        raise InvalidArgumentError(f"query ({qx}, {qy}) outside the {size}x{size} input")

    res = levels[level]
    stage = model.arch.stage_resolutions().index(res)
    a = stack_inputs([anchor_rgb], model.dtype)
    s = stack_inputs([sample_rgb], model.dtype)
    with no_grad():
        f1 = model.encode(Tensor(a))[stage]
        f2 = model.encode(Tensor(s))[stage]
        if mech == Mechanism.GCA_MSA:
            block = model.self_attention[res]
            heads, pe = model.arch.attention.heads, model.arch.attention.positional_encoding
            f1 = attention.linear_self_attention(f1, block, heads, pe)
            f2 = attention.linear_self_attention(f2, block, heads, pe)

    cx, cy = qx * res // size, qy * res // size
    f1d = f1.data.astype(np.float64)
    f2d = f2.data.astype(np.float64)
    if mech == Mechanism.LCA:
        k = attention.effective_window(model.arch.attention.windows[res], res, res)
        local = attention.lca_weights(f1d, f2d, k)[0, cy, cx]
        weights = np.zeros((res + k - 1, res + k - 1))
        weights[cy:cy + k, cx:cx + k] = local
        r = k // 2
        weights = weights[r:r + res, r:r + res]
    else:
        weights = attention.gca_weights(f1d, f2d)[0, cy * res + cx].reshape(res, res)

    scale = size // res
    heatmap = np.kron(weights, np.ones((scale, scale)))
    peak = heatmap.max()
    if peak > 0:
        heatmap = heatmap / peak
    return AttentionMap(weights=weights, heatmap=heatmap, resolution=res, query_cell=(cx, cy))
