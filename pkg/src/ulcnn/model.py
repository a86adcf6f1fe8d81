"""The ULCNN network: IQ channel fusion, cascaded feature-mining blocks with
stride-2 reduction, cross-layer fusion of pooled features, and a softmax
classifier. Also weight (de)serialization."""
from __future__ import annotations

import io
import struct
import zlib
from dataclasses import asdict, dataclass, fields

import numpy as np

from .cv_layers import ComplexTensor, CVBatchNorm, CVConv1D, CVReLU, CVToReal
from .errors import ConfigError, FormatError, ShapeError
from .rv_layers import (BatchNorm, ChannelAttention, ChannelShuffle, Dense, GlobalAvgPool,
                        ReLU, SeparableConv1D, softmax)
from .tensor import DTYPE, Conv1D, Layer, Sequential


@dataclass(frozen=True)
class ModelConfig:
    frame_length: int = 128
    n_cv: int = 16
    n_pw: int = 32
    kernel_size: int = 5
    n_fmdr: int = 6
    n_classes: int = 11
    shuffle_groups: int = 2
    ca_reduction: int = 16
    use_cv_conv: bool = True
    use_ca: bool = True
    use_cs: bool = True
    use_clff: bool = True

    def validate(self):
        problems = []
        for f in ("frame_length", "n_cv", "n_pw", "kernel_size", "n_fmdr", "n_classes",
                  "shuffle_groups", "ca_reduction"):
            if getattr(self, f) < 1:
                problems.append(f"{f} must be >= 1")
        if self.n_pw != 2 * self.n_cv:
            problems.append(f"n_pw ({self.n_pw}) must equal 2*n_cv ({2 * self.n_cv})")
        if self.n_fmdr >= 1 and self.frame_length % (2 ** self.n_fmdr):
            problems.append(f"frame_length {self.frame_length} not divisible by 2**n_fmdr = {2 ** self.n_fmdr}")
        if self.n_pw >= 1 and self.shuffle_groups >= 1 and self.n_pw % self.shuffle_groups:
            problems.append(f"shuffle_groups {self.shuffle_groups} does not divide n_pw {self.n_pw}")
        if self.use_ca and self.n_pw // max(self.ca_reduction, 1) < 1:
            problems.append(f"n_pw/ca_reduction = {self.n_pw}/{self.ca_reduction} leaves no hidden units")
        if problems:
            raise ConfigError("invalid model config: " + "; ".join(problems))
        return self

    @property
    def clff_taps(self):
        """1-based indices of the blocks whose pooled outputs are summed."""
        if not self.use_clff:
            return [self.n_fmdr]
        return list(range(max(1, self.n_fmdr - 2), self.n_fmdr + 1))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class FMDRBlock(Sequential):
    """Separable conv (stride 2) -> BN -> ReLU -> channel shuffle -> channel attention."""

    def __init__(self, c_in, cfg: ModelConfig, rng):
        layers = [
            ("sep", SeparableConv1D(c_in, cfg.n_pw, cfg.kernel_size, stride=2, rng=rng)),
            ("bn", BatchNorm(cfg.n_pw)),
            ("relu", ReLU()),
        ]
        if cfg.use_cs:
            layers.append(("cs", ChannelShuffle(cfg.n_pw, cfg.shuffle_groups)))
        if cfg.use_ca:
            layers.append(("ca", ChannelAttention(cfg.n_pw, cfg.ca_reduction, rng=rng)))
        super().__init__(layers)


class ULCNN(Layer):
    def __init__(self, config: ModelConfig, seed=0):
        super().__init__()
        self.config = config.validate()
        rng = np.random.default_rng(seed)
        cfg = config
        width = 2 * cfg.n_cv
        if cfg.use_cv_conv:
            self.iqcf = Sequential([
                ("conv", CVConv1D(1, cfg.n_cv, cfg.kernel_size, rng=rng)),
                ("bn", CVBatchNorm(cfg.n_cv)),
                ("relu", CVReLU()),
                ("to_real", CVToReal()),
            ])
        else:
            # real conv over the (I, Q) pair with doubled filters keeps the width at 2*n_cv
            self.iqcf = Sequential([
                ("conv", Conv1D(2, width, cfg.kernel_size, rng=rng)),
                ("bn", BatchNorm(width)),
                ("relu", ReLU()),
            ])
        self.fmdr = [FMDRBlock(width if i == 0 else cfg.n_pw, cfg, rng) for i in range(cfg.n_fmdr)]
        self.pools = {l: GlobalAvgPool() for l in cfg.clff_taps}
        self.fc = Dense(cfg.n_pw, cfg.n_classes, rng=rng)

    def children(self):
        yield "iqcf", self.iqcf
        for i, block in enumerate(self.fmdr, 1):
            yield f"fmdr{i}", block
        yield "fc", self.fc

    def _front(self, iq):
        iq = np.asarray(iq, dtype=DTYPE)
        k = self.config.frame_length
        if iq.ndim != 3 or iq.shape[1] != 2:
            raise ShapeError(f"model input must be (B, 2, {k}), got {iq.shape}", axis=1)
        if iq.shape[2] != k:
            raise ShapeError(f"frame length {iq.shape[2]} does not match configured {k}", axis=2)
        if self.config.use_cv_conv:
            return ComplexTensor.from_iq(iq)
        return np.ascontiguousarray(iq.transpose(0, 2, 1))

    def forward_logits(self, iq, train=False):
        h = self.iqcf.forward(self._front(iq), train)
        fused = 0.0
        for i, block in enumerate(self.fmdr, 1):
            h = block.forward(h, train)
            if i in self.pools:
                fused = fused + self.pools[i].forward(h, train)
        return self.fc.forward(fused, train)

    def forward(self, iq, train=False):
        """Class probabilities, shape ``(B, n_classes)``."""
        return softmax(self.forward_logits(iq, train))

    def backward(self, dlogits):
        dfused = self.fc.backward(dlogits)
        dh = None
        for i in range(len(self.fmdr), 0, -1):
            if i in self.pools:
                dp = self.pools[i].backward(dfused)
                dh = dp if dh is None else dh + dp
            dh = self.fmdr[i - 1].backward(dh)
        dx = self.iqcf.backward(dh)
        if isinstance(dx, ComplexTensor):
            return np.stack([dx.re[..., 0], dx.im[..., 0]], axis=1)
        return dx.transpose(0, 2, 1)

    def predict(self, iq):
        return predict_from_probs(self.forward(iq))

    # -- state -----------------------------------------------------------------

    def state_dict(self):
        """Name -> copy of every tensor, trainable first then moving statistics."""
        out = {n: p.copy() for n, p, _ in self.named_params()}
        out.update({n: b.copy() for n, b in self.named_buffers()})
        return out

    def load_state_dict(self, state):
        targets = {n: p for n, p, _ in self.named_params()}
        targets.update(dict(self.named_buffers()))
        unknown = set(state) - set(targets)
        missing = set(targets) - set(state)
        if unknown or missing:
            raise FormatError(f"tensor name mismatch: unknown {sorted(unknown)}, missing {sorted(missing)}")
        for name, value in state.items():
            if targets[name].shape != np.shape(value):
                layer = name.split(".")[0]
                raise FormatError(f"layer {layer!r}: tensor {name} has shape {np.shape(value)}, "
                                  f"model expects {targets[name].shape}")
        for name, value in state.items():
            targets[name][...] = value

    def parameter_breakdown(self):
        """Per top-level component: (trainable, moving)."""
        return {name: child.num_params() for name, child in self.children()}


def build(config: ModelConfig | None = None, seed=0) -> ULCNN:
    return ULCNN(config or ModelConfig(), seed)


def predict_from_probs(probs):
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    return np.argmax(np.asarray(probs), axis=-1)


# --- weight file ----------------------------------------------------------------

MAGIC = b"ULCW"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CONFIG_FIELDS = [f.name for f in fields(ModelConfig)]


def _encode_config(cfg):
    return struct.pack(f"<{len(_CONFIG_FIELDS)}I", *(int(getattr(cfg, f)) for f in _CONFIG_FIELDS))


def _decode_config(raw):
    values = struct.unpack(f"<{len(_CONFIG_FIELDS)}I", raw)
    kw = {}
    for f, v in zip(fields(ModelConfig), values):
        kw[f.name] = bool(v) if f.type in (bool, "bool") else int(v)
    return ModelConfig(**kw)


def weights_to_bytes(model: ULCNN, dtype_code=1) -> bytes:
    """Serialize. ``dtype_code`` 1 (float64) round-trips bit-exactly; 0 stores float32."""
    if dtype_code not in DTYPE_CODES:
        raise ConfigError(f"unknown dtype code {dtype_code}")
    dt = DTYPE_CODES[dtype_code]
    state = model.state_dict()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    buf.write(_encode_config(model.config))
    buf.write(struct.pack("<I", len(state)))
    for name, arr in state.items():
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BB", dtype_code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save_weights(model: ULCNN, path, dtype_code=1):
    data = weights_to_bytes(model, dtype_code)
    with open(path, "wb") as f:
        f.write(data)


class _Reader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"weight file truncated while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def weights_from_bytes(data: bytes, config: ModelConfig | None = None) -> ULCNN:
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError("not a ULCW weight file (bad magic)")
    if len(data) < 10:
        raise FormatError("weight file truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    r = _Reader(body)
    r.take(4, "magic")
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise FormatError(f"unsupported weight file version {version}")
    if zlib.crc32(body) != crc:
        raise FormatError("weight file checksum mismatch (corrupt or truncated)")
    stored = _decode_config(r.take(4 * len(_CONFIG_FIELDS), "config"))
    if config is not None and config != stored:
        diff = [f for f in _CONFIG_FIELDS if getattr(config, f) != getattr(stored, f)]
        where = "layer 'fc' (classifier)" if "n_classes" in diff else "model structure"
        raise ConfigError(f"weight file config mismatch in {diff}; affects {where}")
    (count,) = r.unpack("<I", "tensor count")
    state = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "name").decode("utf-8")
        code, rank = r.unpack("<BB", f"header of {name}")
        if code not in DTYPE_CODES:
            raise FormatError(f"tensor {name}: unknown dtype code {code}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        dt = DTYPE_CODES[code]
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(r.take(n * dt.itemsize, f"data of {name}"), dtype=dt).reshape(dims)
        if name in state:
            raise FormatError(f"duplicate tensor {name}")
        state[name] = arr.astype(DTYPE)
    if r.pos != len(body):
        raise FormatError("trailing bytes after last tensor")
    model = ULCNN(stored)
    model.load_state_dict(state)
    return model


def load_weights(path, config: ModelConfig | None = None) -> ULCNN:
    with open(path, "rb") as f:
        data = f.read()
    return weights_from_bytes(data, config)
