"""CNN-LSTM sequence embedder.

A dilated CNN maps each pair of consecutive frames (or each single frame in the
ablation mode) to a feature vector; an LSTM composes the per-step features and
a linear head on its final hidden state gives the sequence embedding.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence

from .errors import CorruptFileError, InvalidInputError, SchemaVersionError

PAIR = "pair"
SINGLE = "single"


@dataclass(frozen=True)
class ConvLayer:
    out_channels: int
    kernel: int = 3
    dilation: int = 1
    stride: int = 1


@dataclass(frozen=True)
class ModelSpec:
    input_mode: str = PAIR
    conv_layers: tuple[ConvLayer, ...] = ()
    recurrent_hidden: int = 256
    head_dim: int = 256
    input_size: tuple[int, int] = (64, 64)

    def __post_init__(self):
        layers = tuple(l if isinstance(l, ConvLayer) else ConvLayer(*l) if isinstance(l, (list, tuple))
                       else ConvLayer(**l) for l in self.conv_layers)
        object.__setattr__(self, "conv_layers", layers)
        object.__setattr__(self, "input_size", tuple(self.input_size))
        if self.input_mode not in (PAIR, SINGLE):
            raise InvalidInputError(f"input_mode must be '{PAIR}' or '{SINGLE}', got {self.input_mode!r}")
        if not layers:
            raise InvalidInputError("at least one conv layer is required")
        if self.recurrent_hidden < 1 or self.head_dim < 1:
            raise InvalidInputError("recurrent_hidden and head_dim must be positive")
        # odd kernels give odd receptive fields, so 31 px counts as half of 64
        if 2 * (self.receptive_field() + 1) < max(self.input_size):
            raise InvalidInputError(
                f"receptive field {self.receptive_field()} px covers less than half of {self.input_size}"
            )

    @property
    def in_channels(self) -> int:
        return 2 if self.input_mode == PAIR else 1

    @property
    def feature_dim(self) -> int:
        return self.conv_layers[-1].out_channels

    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for layer in self.conv_layers:
            rf += (layer.kernel - 1) * layer.dilation * jump
            jump *= layer.stride
        return rf

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_layers"] = [asdict(l) for l in self.conv_layers]
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        return cls(**d)


def _stack(channels, dilations, strides, kernel=3):
    return tuple(ConvLayer(c, kernel, d, s) for c, d, s in zip(channels, dilations, strides))


def se2mnist_reference(input_mode: str = PAIR) -> ModelSpec:
    """Four stride-1 dilated layers at 64x64."""
    return ModelSpec(input_mode, _stack((16, 32, 32, 64), (1, 2, 4, 8), (1, 1, 1, 1)))


def se2mnist_desk(input_mode: str = PAIR) -> ModelSpec:
    """The 64x64 reference channels with stride 2 on the first two layers (~20x cheaper).

    Dilations grow only as far as the previous layer's receptive field allows,
    so every input pixel reaches every output unit that spans it.
    """
    return ModelSpec(input_mode, _stack((16, 32, 32, 64), (1, 1, 1, 3), (2, 2, 1, 1)))


def real_video_224(input_mode: str = PAIR) -> ModelSpec:
    return ModelSpec(
        input_mode,
        _stack((16, 32, 64, 64, 128, 128), (1, 1, 2, 4, 8, 16), (2, 2, 1, 1, 1, 1)),
        input_size=(224, 224),
    )


def miniature(input_mode: str = PAIR) -> ModelSpec:
    """Two conv layers, 8 hidden units, 8x8 inputs; for gradient checks."""
    return ModelSpec(input_mode, _stack((4, 4), (1, 2), (1, 1)), recurrent_hidden=8, head_dim=8,
                     input_size=(8, 8))


PRESETS = {
    "se2mnist-64": se2mnist_reference,
    "se2mnist-64-desk": se2mnist_desk,
    "real-video-224": real_video_224,
    "miniature": miniature,
}


class MotionEmbedder(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        layers = []
        cin = spec.in_channels
        for layer in spec.conv_layers:
            layers += [
                # no bias: blank input gives exactly zero response; downstream
                # offsets come from the preceding normalization's shift
                nn.Conv2d(cin, layer.out_channels, layer.kernel, stride=layer.stride,
                          padding=layer.dilation * (layer.kernel - 1) // 2, dilation=layer.dilation,
                          bias=False),
                nn.ReLU(),
                nn.BatchNorm2d(layer.out_channels),
            ]
            cin = layer.out_channels
        self.cnn = nn.Sequential(*layers)
        self.rnn = nn.LSTM(spec.feature_dim, spec.recurrent_hidden, batch_first=True)
        self.head = nn.Linear(spec.recurrent_hidden, spec.head_dim)

    def step_inputs(self, bank: torch.Tensor, a: torch.Tensor, b: torch.Tensor | None) -> torch.Tensor:
        """Stack frames ``bank[a]`` (and ``bank[b]``) into CNN input channels."""
        if b is None:
            return bank[a].unsqueeze(1)
        return torch.stack((bank[a], bank[b]), dim=1)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """CNN over (N, C, H, W) inputs, globally average-pooled to (N, F)."""
        if tuple(x.shape[-2:]) != self.spec.input_size or x.shape[1] != self.spec.in_channels:
            raise InvalidInputError(
                f"input of shape {tuple(x.shape[1:])} does not match "
                f"({self.spec.in_channels}, {self.spec.input_size[0]}, {self.spec.input_size[1]})"
            )
        return self.cnn(x).mean(dim=(2, 3))

    def pair_features(self, frame_a: torch.Tensor, frame_b: torch.Tensor) -> torch.Tensor:
        """Features of (N, H, W) frame pairs, or of a single (H, W) pair."""
        single = frame_a.dim() == 2
        if single:
            frame_a, frame_b = frame_a.unsqueeze(0), frame_b.unsqueeze(0)
        if frame_a.shape != frame_b.shape:
            raise InvalidInputError("pair frames differ in shape")
        out = self.features(torch.stack((frame_a, frame_b), dim=1))
        return out[0] if single else out

    def compose(self, steps: torch.Tensor, lengths: Sequence[int]) -> torch.Tensor:
        """Run the LSTM over padded (B, T, F) step features; head on each final step."""
        packed = pack_padded_sequence(steps, torch.as_tensor(list(lengths)), batch_first=True,
                                      enforce_sorted=False)
        _, (h_n, _) = self.rnn(packed)
        return self.head(h_n[-1])

    def embed_indexed(self, bank: torch.Tensor, sequences: Sequence[Sequence[int]],
                      chunk: int = 512) -> torch.Tensor:
        """Embed sequences given as index lists into a (N, H, W) frame bank.

        Each distinct frame pair (or frame, in single-image mode) goes through
        the CNN once, however many sequences share it.
        """
        pair_mode = self.spec.input_mode == PAIR
        min_len = 2 if pair_mode else 1
        steps_per_seq = []
        keys: dict[tuple[int, ...], int] = {}
        for seq in sequences:
            if len(seq) < min_len:
                raise InvalidInputError(f"sequence of length {len(seq)} is too short (need >= {min_len})")
            if pair_mode:
                step_keys = [(int(seq[t]), int(seq[t + 1])) for t in range(len(seq) - 1)]
            else:
                step_keys = [(int(i),) for i in seq]
            steps_per_seq.append([keys.setdefault(k, len(keys)) for k in step_keys])

        key_arr = torch.tensor(list(keys), dtype=torch.long)
        feats = []
        for lo in range(0, len(key_arr), chunk):
            part = key_arr[lo : lo + chunk]
            x = self.step_inputs(bank, part[:, 0], part[:, 1] if pair_mode else None)
            feats.append(self.features(x))
        feats = torch.cat(feats)

        lengths = [len(s) for s in steps_per_seq]
        index = torch.zeros(len(sequences), max(lengths), dtype=torch.long)
        for i, s in enumerate(steps_per_seq):
            index[i, : len(s)] = torch.tensor(s)
        return self.compose(feats[index], lengths)

    def embed_frames(self, frames: torch.Tensor | np.ndarray) -> torch.Tensor:
        """Embedding of one (T, H, W) sequence."""
        frames = torch.as_tensor(np.asarray(frames) if not torch.is_tensor(frames) else frames,
                                 dtype=self.head.weight.dtype)
        return self.embed_indexed(frames, [list(range(frames.shape[0]))])[0]


def embed_sequence(model: MotionEmbedder, frames) -> torch.Tensor:
    """Embedding of a (T, H, W) sequence through consecutive frame pairs."""
    if model.spec.input_mode != PAIR:
        raise InvalidInputError("model was built for single-image input")
    return model.embed_frames(frames)


def embed_sequence_single_image(model: MotionEmbedder, frames) -> torch.Tensor:
    if model.spec.input_mode != SINGLE:
        raise InvalidInputError("model was built for image-pair input")
    return model.embed_frames(frames)


# --------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"MREC0001"
CKPT_SCHEMA = 1


@dataclass
class CheckpointState:
    spec: ModelSpec
    parameters: "OrderedDict[str, np.ndarray]"
    optimizer: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    epoch: int = 0
    rng_state: bytes = b""
    meta: dict = field(default_factory=dict)

    def build_model(self) -> MotionEmbedder:
        model = MotionEmbedder(self.spec)
        load_parameters(model, self.parameters)
        model.eval()
        return model


def model_arrays(model: nn.Module) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((k, v.detach().cpu().numpy().astype("<f4")) for k, v in model.state_dict().items())


def load_parameters(model: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    current = model.state_dict()
    missing = set(current) - set(arrays)
    if missing:
        raise CorruptFileError(f"checkpoint lacks parameters: {sorted(missing)}")
    new = OrderedDict()
    for k, ref in current.items():
        arr = np.asarray(arrays[k])
        if tuple(arr.shape) != tuple(ref.shape):
            raise CorruptFileError(f"parameter {k}: shape {arr.shape} != model {tuple(ref.shape)}")
        new[k] = torch.from_numpy(arr.copy()).to(ref.dtype)
    model.load_state_dict(new)


def optimizer_arrays(opt: torch.optim.Optimizer) -> tuple["OrderedDict[str, np.ndarray]", list]:
    sd = opt.state_dict()
    arrays = OrderedDict()
    for idx, st in sd["state"].items():
        for key, val in st.items():
            arrays[f"{idx}/{key}"] = np.asarray(torch.as_tensor(val).detach().cpu().numpy(), dtype="<f4")
    return arrays, sd["param_groups"]


def restore_optimizer(opt: torch.optim.Optimizer, arrays: dict[str, np.ndarray], groups: list) -> None:
    state: dict[int, dict] = {}
    for name, arr in arrays.items():
        idx, key = name.split("/", 1)
        t = torch.from_numpy(np.array(arr, dtype=np.float32))
        state.setdefault(int(idx), {})[key] = t
    opt.load_state_dict({"state": state, "param_groups": groups})


def torch_rng_bytes() -> bytes:
    return torch.get_rng_state().numpy().tobytes()


def _pack_blobs(buf: io.BytesIO, blobs: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(blobs)))
    for name, arr in blobs.items():
        raw = name.encode()
        arr = np.asarray(arr, dtype="<f4", order="C")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptFileError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def blobs(self) -> "OrderedDict[str, np.ndarray]":
        (count,) = self.unpack("<I")
        out = OrderedDict()
        for _ in range(count):
            (nlen,) = self.unpack("<H")
            name = self.take(nlen).decode()
            (ndim,) = self.unpack("<B")
            shape = self.unpack(f"<{ndim}I")
            size = int(np.prod(shape, dtype=np.int64))
            out[name] = np.frombuffer(self.take(4 * size), dtype="<f4").reshape(shape).copy()
        return out


def save_checkpoint(state: CheckpointState, path: str | Path) -> None:
    """Write ``state`` atomically (tmp file + rename)."""
    header = json.dumps({"spec": state.spec.to_dict(), "meta": state.meta}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_SCHEMA, len(header)))
    buf.write(header)
    _pack_blobs(buf, state.parameters)
    _pack_blobs(buf, state.optimizer)
    buf.write(struct.pack("<qI", state.epoch, len(state.rng_state)))
    buf.write(state.rng_state)
    payload = buf.getvalue()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload + struct.pack("<I", zlib.crc32(payload)))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> CheckpointState:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError as exc:
        raise CorruptFileError(f"{path}: no such checkpoint") from exc
    if data[:8] != CKPT_MAGIC:
        raise CorruptFileError(f"{path}: not a checkpoint (bad magic {data[:8]!r})")
    r = _Reader(data, path)
    r.take(8)
    (version,) = r.unpack("<I")
    if version != CKPT_SCHEMA:
        raise SchemaVersionError(f"{path}: checkpoint schema {version}, this build reads {CKPT_SCHEMA}")
    if len(data) < 12 or zlib.crc32(data[:-4]) != struct.unpack("<I", data[-4:])[0]:
        raise CorruptFileError(f"{path}: checksum mismatch (truncated or corrupt)")
    (hlen,) = r.unpack("<I")
    header = json.loads(r.take(hlen))
    params = r.blobs()
    opt = r.blobs()
    epoch, rlen = r.unpack("<qI")
    rng_state = r.take(rlen)
    return CheckpointState(ModelSpec.from_dict(header["spec"]), params, opt, epoch, rng_state,
                           header.get("meta", {}))
