"""Y-Net and the single-encoder U-Net baselines.

Both encoders follow the VGG19 convolutional stack (16 3x3 convs in five
blocks, each block closed by a 2x2 max-pool, no fully connected layers).
The block-final conv activation of each depth is a skip feature; in Y-Net
the two encoders' skip features are summed per depth before being
concatenated into the decoder.
"""

from __future__ import annotations

import logging
import warnings
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Optional, Union

import numpy as np

from .tensor import (
    BatchNormState,
    ShapeError,
    Tensor,
    add,
    batchnorm,
    concat,
    conv2d,
    global_max_pool,
    linear,
    maxpool2d,
    relu,
    selu,
    sigmoid,
    upsample2d,
)

logger = logging.getLogger(__name__)

VGG19_WIDTHS = (64, 128, 256, 512, 512)
VGG19_BLOCK_CONVS = (2, 2, 4, 4, 4)
DECODER_WIDTHS = (512, 256, 128, 64, 32)
VARIANTS = ("ynet", "unet_scratch", "unet_pretrained_encoder")

Pretrained = Union[str, Path, Mapping[str, np.ndarray], None]


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 224
    in_channels: int = 3
    width_scale: float = 1.0
    block_convs: tuple[int, ...] = VGG19_BLOCK_CONVS
    decoder_convs_per_block: int = 3
    variant: str = "ynet"

    def __post_init__(self):
        object.__setattr__(self, "block_convs", tuple(self.block_convs))
        if self.input_size <= 0 or self.input_size % 32:
            raise ValueError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if not 0 < self.width_scale <= 1:
            raise ValueError(f"width_scale must lie in (0, 1], got {self.width_scale}")
        if len(self.block_convs) != 5 or sum(self.block_convs) != 16:
            raise ValueError(f"block_convs must be 5 blocks totalling 16 convs, got {self.block_convs}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")

    @property
    def encoder_widths(self) -> tuple[int, ...]:
        return tuple(max(1, round(w * self.width_scale)) for w in VGG19_WIDTHS)

    @property
    def decoder_widths(self) -> tuple[int, ...]:
        return tuple(max(1, round(w * self.width_scale)) for w in DECODER_WIDTHS)

    @property
    def skip_table(self) -> dict[int, int]:
        """Depth -> index of the conv whose activation is skipped (1-based)."""
        return {i + 1: n for i, n in enumerate(self.block_convs)}


def xavier_normal(shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_out, fan_in = shape[0] * receptive, shape[1] * receptive
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return (rng.standard_normal(shape) * std).astype(np.float32)


def _param(data: np.ndarray, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class EncoderFeatures:
    skips: list[Tensor]
    bottleneck: Tensor


class Encoder:
    """VGG19-style conv stack.

    ``activation`` is ``"relu"`` for the transferable (pretrained) encoder and
    ``"selu"`` for the encoder trained from scratch.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator, activation: str = "relu"):
        if activation not in ("relu", "selu"):
            raise ValueError(f"unsupported activation {activation!r}")
        self.config = config
        self.activation = activation
        self._act: Callable[[Tensor], Tensor] = relu if activation == "relu" else selu
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        c_in = config.in_channels
        for b, (width, n_convs) in enumerate(zip(config.encoder_widths, config.block_convs), start=1):
            for j in range(1, n_convs + 1):
                name = f"block{b}.conv{j}"
                self.params[f"{name}.weight"] = _param(xavier_normal((width, c_in, 3, 3), rng), f"{name}.weight")
                self.params[f"{name}.bias"] = _param(np.zeros(width, np.float32), f"{name}.bias")
                c_in = width

    @property
    def conv_names(self) -> list[str]:
        return [k.rsplit(".", 1)[0] for k in self.params if k.endswith(".weight")]

    def __call__(self, x: Tensor) -> EncoderFeatures:
        skips = []
        for b, n_convs in enumerate(self.config.block_convs, start=1):
            for j in range(1, n_convs + 1):
                name = f"block{b}.conv{j}"
                x = self._act(conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"]))
            skips.append(x)
            x = maxpool2d(x)
        return EncoderFeatures(skips, x)


def build_encoder(
    config: ModelConfig,
    rng: np.random.Generator,
    activation: str = "relu",
    pretrained: Optional[Mapping[str, np.ndarray]] = None,
) -> Encoder:
    """Xavier-normal encoder, optionally overwritten by checkpoint weights."""
    enc = Encoder(config, rng, activation)
    if pretrained is not None:
        from .weights_io import load_encoder_weights

        load_encoder_weights(enc, pretrained)
    return enc


def sum_skips(first: EncoderFeatures, second: EncoderFeatures) -> EncoderFeatures:
    """Fuse two encoders depth by depth by elementwise sum."""
    if len(first.skips) != len(second.skips):
        raise ShapeError(f"encoders expose {len(first.skips)} and {len(second.skips)} depths")
    skips = [add(a, b) for a, b in zip(first.skips, second.skips)]
    return EncoderFeatures(skips, add(first.bottleneck, second.bottleneck))


class Decoder:
    """Five upsample-concat blocks of conv-SELU-BN, then a 1x1 sigmoid head."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.bn: "OrderedDict[str, BatchNormState]" = OrderedDict()
        skip_ch = config.encoder_widths
        c_prev = skip_ch[-1]
        for b, width in enumerate(config.decoder_widths, start=1):
            c_in = c_prev + skip_ch[5 - b]
            for j in range(1, config.decoder_convs_per_block + 1):
                name = f"block{b}.conv{j}"
                self.params[f"{name}.weight"] = _param(xavier_normal((width, c_in, 3, 3), rng), f"{name}.weight")
                self.params[f"{name}.bias"] = _param(np.zeros(width, np.float32), f"{name}.bias")
                bn = f"block{b}.bn{j}"
                self.params[f"{bn}.gamma"] = _param(np.ones(width, np.float32), f"{bn}.gamma")
                self.params[f"{bn}.beta"] = _param(np.zeros(width, np.float32), f"{bn}.beta")
                self.bn[bn] = BatchNormState(width)
                c_in = width
            c_prev = width
        self.params["head.weight"] = _param(xavier_normal((1, c_prev, 1, 1), rng), "head.weight")
        self.params["head.bias"] = _param(np.zeros(1, np.float32), "head.bias")

    def __call__(self, features: EncoderFeatures, mode: str = "train") -> Tensor:
        y = features.bottleneck
        p = self.params
        for b in range(1, 6):
            y = concat(upsample2d(y), features.skips[5 - b])
            for j in range(1, self.config.decoder_convs_per_block + 1):
                y = selu(conv2d(y, p[f"block{b}.conv{j}.weight"], p[f"block{b}.conv{j}.bias"]))
                bn = f"block{b}.bn{j}"
                y = batchnorm(y, p[f"{bn}.gamma"], p[f"{bn}.beta"], self.bn[bn], mode)
        return sigmoid(conv2d(y, p["head.weight"], p["head.bias"]))

    def buffers(self) -> "OrderedDict[str, np.ndarray]":
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, state in self.bn.items():
            out[f"{name}.running_mean"] = state.running_mean
            out[f"{name}.running_var"] = state.running_var
        return out

    def set_buffer(self, key: str, value: np.ndarray) -> None:
        bn, stat = key.rsplit(".", 1)
        state = self.bn[bn]
        setattr(state, stat, np.array(value, dtype=np.float32))
        # loaded statistics count as trained ones for the infer-mode warning
        state.updates = max(state.updates, 1)


def build_decoder(config: ModelConfig, rng: np.random.Generator) -> Decoder:
    return Decoder(config, rng)


class SegmentationModel:
    """Common plumbing: named parameter groups, state dicts, inference."""

    config: ModelConfig
    components: "OrderedDict[str, Union[Encoder, Decoder]]"
    pretrained_loaded: bool = False

    def parameters(self) -> "OrderedDict[str, Tensor]":
        out: "OrderedDict[str, Tensor]" = OrderedDict()
        for group, comp in self.components.items():
            for name, t in comp.params.items():
                out[f"{group}.{name}"] = t
        return out

    def param_groups(self) -> "OrderedDict[str, list[str]]":
        groups: "OrderedDict[str, list[str]]" = OrderedDict()
        for group, comp in self.components.items():
            groups[group] = [f"{group}.{name}" for name in comp.params]
        return groups

    def group_of(self, name: str) -> str:
        return name.split(".", 1)[0]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters().values())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, t in self.parameters().items():
            state[name] = t.data.copy()
        for group, comp in self.components.items():
            if isinstance(comp, Decoder):
                for name, buf in comp.buffers().items():
                    state[f"{group}.{name}"] = buf.copy()
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        params = self.parameters()
        expected = self.state_dict()
        if strict:
            missing = [k for k in expected if k not in state]
            extra = [k for k in state if k not in expected]
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for key, value in state.items():
            if key not in expected:
                continue
            value = np.asarray(value)
            if value.shape != expected[key].shape:
                raise ShapeError(f"{key}: checkpoint shape {list(value.shape)} vs model {list(expected[key].shape)}")
            if key in params:
                params[key].data = np.array(value, dtype=np.float32)
            else:
                group, rest = key.split(".", 1)
                self.components[group].set_buffer(rest, value)

    def features(self, x: Tensor) -> EncoderFeatures:
        raise NotImplementedError

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        n, c, h, w = x.shape
        if c != self.config.in_channels or h % 32 or w % 32:
            raise ShapeError(f"input {list(x.shape)} needs {self.config.in_channels} channels and sides divisible by 32")
        return self.components["decoder"](self.features(x), mode)

    __call__ = forward

    def predict(self, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
        """Probability maps ``[N, H, W]`` for images ``[N, 3, H, W]`` in [0, 1]."""
        outs = []
        for start in range(0, len(images), batch_size):
            out = self.forward(Tensor(images[start:start + batch_size]), mode="infer")
            outs.append(out.data[:, 0])
        if not outs:
            return np.zeros((0, self.config.input_size, self.config.input_size), np.float32)
        return np.concatenate(outs, axis=0)


class YNet(SegmentationModel):
    """Two encoders on the same input, sum-skip-concatenated into one decoder."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = config
        self.components = OrderedDict(
            encoder1=build_encoder(config, rng, "relu"),
            encoder2=build_encoder(config, rng, "selu"),
            decoder=build_decoder(config, rng),
        )

    def features(self, x: Tensor) -> EncoderFeatures:
        return sum_skips(self.components["encoder1"](x), self.components["encoder2"](x))


class UNet(SegmentationModel):
    """Single encoder with plain skips into the Y-Net decoder topology."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = config
        self.components = OrderedDict(
            encoder1=build_encoder(config, rng, "relu"),
            decoder=build_decoder(config, rng),
        )

    def features(self, x: Tensor) -> EncoderFeatures:
        return self.components["encoder1"](x)


def _attach_pretrained(model: SegmentationModel, pretrained: Pretrained) -> None:
    if pretrained is None:
        msg = f"{model.config.variant}: no pretrained checkpoint given, encoder1 keeps its Xavier initialisation"
        warnings.warn(msg, stacklevel=3)
        logger.warning("!!! %s", msg)
        return
    from .weights_io import transfer_encoder

    transfer_encoder(pretrained, model, target="encoder1")


def build_ynet(config: ModelConfig, pretrained: Pretrained = None, seed: int = 0) -> YNet:
    if config.variant != "ynet":
        raise ValueError(f"build_ynet needs variant 'ynet', got {config.variant!r}")
    model = YNet(config, seed)
    _attach_pretrained(model, pretrained)
    return model


def build_unet_baseline(config: ModelConfig, pretrained: Pretrained = None, seed: int = 0) -> UNet:
    if config.variant not in ("unet_scratch", "unet_pretrained_encoder"):
        raise ValueError(f"build_unet_baseline needs a unet variant, got {config.variant!r}")
    model = UNet(config, seed)
    if config.variant == "unet_pretrained_encoder":
        _attach_pretrained(model, pretrained)
    elif pretrained is not None:
        raise ValueError("unet_scratch does not take pretrained weights")
    return model


def build_model(config: ModelConfig, pretrained: Pretrained = None, seed: int = 0) -> SegmentationModel:
    if config.variant == "ynet":
        return build_ynet(config, pretrained, seed)
    return build_unet_baseline(config, pretrained, seed)


class EncoderClassifier:
    """Encoder-one backbone with a linear head for proxy pretraining.

    The head sees the global max of every depth's skip feature, so a small
    polyp anywhere in the frame reaches it through a short gradient path.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = config
        self.encoder = build_encoder(config, rng, "relu")
        width = sum(config.encoder_widths)
        self.head = OrderedDict(
            weight=_param(xavier_normal((1, width), rng), "classifier.weight"),
            bias=_param(np.zeros(1, np.float32), "classifier.bias"),
        )

    def parameters(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict(self.encoder.params)
        out["classifier.weight"] = self.head["weight"]
        out["classifier.bias"] = self.head["bias"]
        return out

    def __call__(self, x: Tensor) -> Tensor:
        skips = self.encoder(x).skips
        pooled = global_max_pool(skips[0])
        for feat in skips[1:]:
            pooled = concat(pooled, global_max_pool(feat))
        return sigmoid(linear(pooled, self.head["weight"], self.head["bias"]))
