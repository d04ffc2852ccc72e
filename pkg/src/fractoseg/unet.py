"""VGG16-style U-net: encoder, mirrored decoder with skip concatenation, 1x1 head.

Parameter names are stable and used by the weight container:

    enc{s}.conv{r}.kernel / .bias     encoder stage s (1-based), conv r
    dec{s}.up.kernel / .bias          2x2 stride-2 transpose conv into stage s
    dec{s}.conv{r}.kernel / .bias     decoder convs after the skip concat
    head.kernel / head.bias           1x1 classifier to `num_classes` logits

Encoder stage s runs its convs (each followed by ReLU) at resolution H / 2^(s-1)
and then pools. After the last pool the feature map is H / 2^stages (20x20 for
a 640x640 tile with 5 stages). The decoder walks back from the last stage: up
to the stage resolution, concat with that stage's pre-pool output, convs.
"""
from __future__ import annotations

import io
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_ops as T
from .tensor_ops import ConvParams, ShapeError

VGG16_REPEATS = (2, 2, 3, 3, 3)
VGG16_WIDTHS = (64, 128, 256, 512, 512)
DESK_WIDTHS = (8, 16, 32, 64, 64)


class WeightFileError(Exception):
    """Base class for weight container problems."""


class FormatError(WeightFileError):
    """Bad magic bytes or unsupported version."""


class TruncatedFileError(WeightFileError):
    """The file ended before all declared records were read."""


class UnknownTensorError(WeightFileError):
    """The file names a tensor the model does not have."""


class MissingTensorError(WeightFileError):
    """The model needs tensors the file does not contain."""

    def __init__(self, missing):
        self.missing = sorted(missing)
        super().__init__(f"missing tensors: {', '.join(self.missing)}")


class DimensionMismatchError(WeightFileError):
    """A stored tensor's dims disagree with the model config."""


@dataclass(frozen=True)
class UNetConfig:
    stages: int = 5
    encoder_channels: tuple[int, ...] = DESK_WIDTHS
    conv_repeats: tuple[int, ...] = VGG16_REPEATS
    num_classes: int = 3
    input_channels: int = 1

    def __post_init__(self):
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        # allow longer width/repeat lists (e.g. the VGG defaults) and truncate
        if len(self.encoder_channels) < self.stages or len(self.conv_repeats) < self.stages:
            raise ValueError(
                f"need {self.stages} widths and repeats, got {self.encoder_channels} / {self.conv_repeats}"
            )
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels[: self.stages]))
        object.__setattr__(self, "conv_repeats", tuple(int(r) for r in self.conv_repeats[: self.stages]))
        if min(self.encoder_channels) < 1 or min(self.conv_repeats) < 1:
            raise ValueError("widths and repeats must be positive")

    @classmethod
    def full_scale(cls) -> "UNetConfig":
        return cls(stages=5, encoder_channels=VGG16_WIDTHS, conv_repeats=VGG16_REPEATS)

    @classmethod
    def desk(cls, stages: int = 3) -> "UNetConfig":
        return cls(stages=stages, encoder_channels=DESK_WIDTHS, conv_repeats=VGG16_REPEATS)

    @property
    def divisor(self) -> int:
        return 2 ** self.stages

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def parameter_shapes(cfg: UNetConfig) -> dict[str, tuple[int, ...]]:
    """Name -> dims for every parameter, in graph order."""
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = cfg.input_channels
    for s, (width, reps) in enumerate(zip(cfg.encoder_channels, cfg.conv_repeats), start=1):
        for r in range(1, reps + 1):
            shapes[f"enc{s}.conv{r}.kernel"] = (width, c_in, 3, 3)
            shapes[f"enc{s}.conv{r}.bias"] = (width,)
            c_in = width
    for s in range(cfg.stages, 0, -1):
        width, reps = cfg.encoder_channels[s - 1], cfg.conv_repeats[s - 1]
        # transpose kernel layout is (C_in, C_out, 2, 2)
        shapes[f"dec{s}.up.kernel"] = (c_in, width, 2, 2)
        shapes[f"dec{s}.up.bias"] = (width,)
        c_in = 2 * width
        for r in range(1, reps + 1):
            shapes[f"dec{s}.conv{r}.kernel"] = (width, c_in, 3, 3)
            shapes[f"dec{s}.conv{r}.bias"] = (width,)
            c_in = width
    shapes["head.kernel"] = (cfg.num_classes, c_in, 1, 1)
    shapes["head.bias"] = (cfg.num_classes,)
    return shapes


def parameter_count(cfg: UNetConfig) -> int:
    return sum(int(np.prod(s)) for s in parameter_shapes(cfg).values())


@dataclass
class UNetModel:
    config: UNetConfig
    params: dict[str, np.ndarray]
    frozen: set[str] = field(default_factory=set)
    training: bool = True
    _tape: list | None = field(default=None, repr=False)

    @property
    def dtype(self):
        return self.params["head.kernel"].dtype

    def encoder_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("enc")]

    def freeze_encoder(self, freeze: bool = True) -> None:
        if freeze:
            self.frozen.update(self.encoder_names())
        else:
            self.frozen.difference_update(self.encoder_names())

    def copy(self) -> "UNetModel":
        return UNetModel(self.config, {k: v.copy() for k, v in self.params.items()}, set(self.frozen), self.training)

    def _conv(self, prefix: str, pad: int = 1) -> ConvParams:
        return ConvParams(self.params[prefix + ".kernel"], self.params[prefix + ".bias"], stride=1, padding=pad)

    def _up(self, s: int) -> ConvParams:
        return ConvParams(self.params[f"dec{s}.up.kernel"], self.params[f"dec{s}.up.bias"], stride=2, padding=0)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Logits of shape (N, num_classes, H, W); H and W must divide by 2^stages."""
        T.check_tensor(x)
        cfg = self.config
        n, c, h, w = x.shape
        if c != cfg.input_channels:
            raise ShapeError(f"input has {c} channels, model expects {cfg.input_channels}")
        d = cfg.divisor
        if h % d or w % d:
            raise ShapeError(
                f"input {h}x{w} is not divisible by {d} (2^{cfg.stages}); "
                "pad the image to a multiple first (see dataset.pad_to_multiple)"
            )
        x = x.astype(self.dtype, copy=False)
        tape: list = []
        skips = []
        for s, reps in enumerate(cfg.conv_repeats, start=1):
            for r in range(1, reps + 1):
                name = f"enc{s}.conv{r}"
                z = T.conv2d_forward(x, self._conv(name))
                tape.append(("conv", name, x, z))
                x = T.relu_forward(z)
            skips.append(x)
            x, idx = T.maxpool2x2_forward(x)
            tape.append(("pool", s, idx))
        for s in range(cfg.stages, 0, -1):
            up_in = x
            x = T.conv2d_transpose_forward(x, self._up(s))
            tape.append(("up", s, up_in))
            skip = skips[s - 1]
            assert skip.shape[2:] == x.shape[2:], (skip.shape, x.shape)
            x = T.concat_channels(x, skip)
            tape.append(("concat", s, skip.shape[1]))
            for r in range(1, cfg.conv_repeats[s - 1] + 1):
                name = f"dec{s}.conv{r}"
                z = T.conv2d_forward(x, self._conv(name))
                tape.append(("conv", name, x, z))
                x = T.relu_forward(z)
        logits = T.conv2d_forward(x, self._conv("head", pad=0))
        tape.append(("head", x))
        self._tape = tape if self.training else None
        return logits

    __call__ = forward

    def backward(self, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients for every parameter from the last `forward` call.

        Frozen parameters get zero gradients.
        """
        if self._tape is None:
            raise RuntimeError("backward called without a preceding training-mode forward pass")
        grads: dict[str, np.ndarray] = {}
        g = grad_logits.astype(self.dtype, copy=False)
        skip_grads: dict[int, np.ndarray] = {}
        for entry in reversed(self._tape):
            kind = entry[0]
            if kind == "head":
                x = entry[1]
                g, gk, gb = T.conv2d_backward(x, self._conv("head", pad=0), g)
                grads["head.kernel"], grads["head.bias"] = gk, gb
            elif kind == "conv":
                _, name, x, z = entry
                g = T.relu_backward(z, g)
                g, gk, gb = T.conv2d_backward(x, self._conv(name), g)
                grads[name + ".kernel"], grads[name + ".bias"] = gk, gb
            elif kind == "concat":
                _, s, c_skip = entry
                g, g_skip = T.split_channels(g, g.shape[1] - c_skip)
                skip_grads[s] = g_skip
            elif kind == "up":
                _, s, up_in = entry
                g, gk, gb = T.conv2d_transpose_backward(up_in, self._up(s), g)
                grads[f"dec{s}.up.kernel"], grads[f"dec{s}.up.bias"] = gk, gb
            elif kind == "pool":
                _, s, idx = entry
                g = T.maxpool2x2_backward(idx, g) + skip_grads.pop(s)
        self._tape = None
        for name in self.frozen:
            grads[name] = np.zeros_like(self.params[name])
        return grads


def build(config: UNetConfig, seed: int = 0, dtype=np.float32) -> UNetModel:
    """He-normal kernels, zero biases, drawn in graph order from `seed`."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        if ".up." in name:
            # transpose kernels: fan-in per output pixel is C_in (one tap per input)
            fan_in = shape[0]
        else:
            fan_in = shape[1] * shape[2] * shape[3]
        params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    return UNetModel(config, params)


# ---------------------------------------------------------------- FSEG container

MAGIC = b"FSEG"
VERSION = 1


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_tensors(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    pos = 0

    def take(nbytes: int, what: str) -> bytes:
        nonlocal pos
        if pos + nbytes > len(data):
            raise TruncatedFileError(f"{path}: truncated while reading {what} at byte {pos}")
        chunk = data[pos:pos + nbytes]
        pos += nbytes
        return chunk

    if data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    pos = 4
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported FSEG version {version}")
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        (nlen,) = struct.unpack("<H", take(2, f"record {i} name length"))
        name = take(nlen, f"record {i} name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, f"{name} rank"))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, f"{name} dims"))
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * size, f"{name} data"), dtype="<f4").reshape(dims)
        out[name] = arr.astype(np.float32)
    return out


def save_weights(model: UNetModel, path) -> None:
    write_tensors(path, model.params)


def infer_config(tensors: dict[str, np.ndarray]) -> UNetConfig:
    """Recover the architecture from tensor names and dims."""
    stages = 0
    while f"enc{stages + 1}.conv1.kernel" in tensors:
        stages += 1
    if stages == 0 or "head.kernel" not in tensors:
        raise MissingTensorError([n for n in ("enc1.conv1.kernel", "head.kernel") if n not in tensors])
    widths, repeats = [], []
    for s in range(1, stages + 1):
        widths.append(tensors[f"enc{s}.conv1.kernel"].shape[0])
        r = 0
        while f"enc{s}.conv{r + 1}.kernel" in tensors:
            r += 1
        repeats.append(r)
    return UNetConfig(
        stages=stages,
        encoder_channels=tuple(widths),
        conv_repeats=tuple(repeats),
        num_classes=tensors["head.kernel"].shape[0],
        input_channels=tensors["enc1.conv1.kernel"].shape[1],
    )


def _assign(model: UNetModel, tensors: dict[str, np.ndarray], names) -> None:
    for name in names:
        want = model.params[name].shape
        got = tensors[name].shape
        if want != got:
            raise DimensionMismatchError(f"tensor {name}: file dims {got} != model dims {want}")
    for name in names:
        model.params[name] = tensors[name].astype(model.dtype).copy()


def load_weights(path, config: UNetConfig | None = None) -> UNetModel:
    """Load a model from an FSEG file; the config is inferred when not given."""
    tensors = read_tensors(path)
    cfg = config or infer_config(tensors)
    model = build(cfg, seed=0)
    unknown = sorted(set(tensors) - set(model.params))
    if unknown:
        raise UnknownTensorError(f"{path}: unknown tensors {', '.join(unknown)}")
    missing = set(model.params) - set(tensors)
    if missing:
        raise MissingTensorError(missing)
    _assign(model, tensors, list(model.params))
    return model


def import_encoder(model: UNetModel, path, freeze: bool = False) -> UNetModel:
    """Replace encoder parameters from a weight file, leaving the decoder alone.

    Extra tensors in the file are ignored. If the file's first conv has 3 input
    channels and the model takes 1 (RGB-pretrained weights into a grayscale
    net), the kernel is summed over the colour axis, which gives the same
    response to a gray image replicated over R, G and B.
    """
    tensors = dict(read_tensors(path))
    names = model.encoder_names()
    missing = [n for n in names if n not in tensors]
    if missing:
        raise MissingTensorError(missing)
    first = "enc1.conv1.kernel"
    k = tensors[first]
    if k.shape[1] == 3 and model.config.input_channels == 1:
        tensors[first] = k.sum(axis=1, keepdims=True)
    _assign(model, tensors, names)
    if freeze:
        model.freeze_encoder(True)
    return model
