"""Audio and visual front ends and the visual feature file formats."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernel as K
from .config import ModelConfig
from .dsp import SignalTooShortError, atomic_write
from .kernel import DimensionError, Tensor
from .layers import Module, fan_in_uniform



class VisualFormatError(ValueError):
    pass


@dataclass
class VisualStream:
    """Per-frame visual input: raw grayscale ``frames`` (N x H x W, values in [0, 1])
    or precomputed ``features`` (N x d_v)."""

    mode: str
    data: np.ndarray
    fps: float = 25.0

    def __post_init__(self):
        if self.mode not in ("frames", "features"):
            raise VisualFormatError(f"visual mode must be 'frames' or 'features', got {self.mode!r}")
        want = 3 if self.mode == "frames" else 2
        if self.data.ndim != want:
            raise DimensionError(f"{self.mode} stream must be {want}-D, got shape {self.data.shape}")
        if self.data.shape[0] < 1:
            raise DimensionError("visual stream needs at least one frame")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]


class AudioEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.weight = self.add_param("weight", fan_in_uniform(rng, (cfg.enc_channels, 1, cfg.enc_kernel)))

    def __call__(self, x: Tensor) -> Tensor:
        """(B, T) waveform -> (B, C, T_latent), non-negative."""
        if x.ndim != 2:
            raise DimensionError(f"audio encoder expects (B, T), got {x.shape}")
        if x.shape[1] < self.cfg.enc_kernel:
            raise SignalTooShortError(f"need at least {self.cfg.enc_kernel} samples, got {x.shape[1]}")
        return K.relu(K.conv1d(x.reshape(x.shape[0], 1, x.shape[1]), self.weight, self.cfg.enc_stride))


class _ResidualStage(Module):
    def __init__(self, c_in: int, c_out: int, stride: int, rng: np.random.Generator):
        super().__init__()
        self.stride = stride
        self.w1 = self.add_param("conv1.weight", fan_in_uniform(rng, (c_out, c_in, 3, 3)))
        self.b1 = self.add_param("conv1.bias", np.zeros(c_out))
        self.w2 = self.add_param("conv2.weight", fan_in_uniform(rng, (c_out, c_out, 3, 3)))
        self.b2 = self.add_param("conv2.bias", np.zeros(c_out))
        self.ws = None
        if stride != 1 or c_in != c_out:
            self.ws = self.add_param("shortcut.weight", fan_in_uniform(rng, (c_out, c_in, 1, 1)))

    def __call__(self, x: Tensor) -> Tensor:
        y = K.relu(_bias(K.conv(x, self.w1, stride=self.stride, padding=1), self.b1))
        y = _bias(K.conv(y, self.w2, stride=1, padding=1), self.b2)
        skip = x if self.ws is None else K.conv(x, self.ws, stride=self.stride)
        return K.relu(y + skip)


def _bias(x: Tensor, b: Tensor) -> Tensor:
    return x + b.reshape((1, -1) + (1,) * (x.ndim - 2))


class VisualEncoder(Module):
    """3-D front end (kernel 5x7x7, spatial stride 2, edge-padded in time) -> ResNet-9 trunk per frame
    -> global average pool -> linear to ``visual_dim``.

    The trunk is four residual stages of two 3x3 convolutions each (stage
    strides 1, 2, 2, 2), which with the front end makes nine weight layers.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        c = cfg.visual_channels
        self.front_w = self.add_param("frontend.weight", fan_in_uniform(rng, (c[0], 1) + tuple(cfg.frontend_kernel)))
        self.front_b = self.add_param("frontend.bias", np.zeros(c[0]))
        self.stages = []
        c_prev = c[0]
        for i, (ch, st) in enumerate(zip(c, (1, 2, 2, 2))):
            self.stages.append(self.add_child(f"stage{i}", _ResidualStage(c_prev, ch, st, rng)))
            c_prev = ch
        self.lin_w = self.add_param("linear.weight", fan_in_uniform(rng, (cfg.visual_dim, c_prev)))
        self.lin_b = self.add_param("linear.bias", np.zeros(cfg.visual_dim))

    def __call__(self, frames: Tensor) -> Tensor:
        """(B, N, H, W) frames -> (B, N, visual_dim)."""
        cfg = self.cfg
        if frames.ndim != 4 or frames.shape[2:] != (cfg.frame_size, cfg.frame_size):
            raise DimensionError(f"expected frames (B, N, {cfg.frame_size}, {cfg.frame_size}), got {frames.shape}")
        B, N = frames.shape[:2]
        kt, kh, kw = cfg.frontend_kernel
        x = frames.reshape(B, 1, N, cfg.frame_size, cfg.frame_size)
        # replicate edge frames in time so a static face gives the same feature at every frame
        pt = kt // 2
        if pt:
            x = K.concat([x[:, :, :1]] * pt + [x] + [x[:, :, -1:]] * pt, axis=2)
        x = K.relu(_bias(K.conv(x, self.front_w, stride=(1, 2, 2), padding=(0, kh // 2, kw // 2)), self.front_b))
        c0, h, w = x.shape[1], x.shape[3], x.shape[4]
        x = x.transpose(0, 2, 1, 3, 4).reshape(B * N, c0, h, w)
        for stage in self.stages:
            x = stage(x)
        x = x.mean(axis=(2, 3))
        return K.linear(x, self.lin_w, self.lin_b).reshape(B, N, cfg.visual_dim)


def visual_encode(v: VisualStream, cfg: ModelConfig, encoder: VisualEncoder | None = None,
                  dtype=np.float64) -> Tensor:
    """Per-frame features (N x d_v). Features mode is a bit-exact passthrough."""
    if v.mode == "features":
        if v.data.shape[1] != cfg.visual_dim:
            raise DimensionError(f"visual feature dim {v.data.shape[1]} != configured {cfg.visual_dim}")
        return Tensor(v.data)
    if encoder is None:
        raise ValueError("frames mode needs a VisualEncoder")
    return encoder(Tensor(v.data[None].astype(dtype))).reshape(v.n_frames, cfg.visual_dim)


def align_matrix(n_frames: int, target_len: int, dtype=np.float64) -> np.ndarray:
    """(target_len x n_frames) linear-interpolation weights; endpoints map to endpoints."""
    if n_frames < 1 or target_len < 1:
        raise DimensionError(f"need positive lengths, got N={n_frames}, T={target_len}")
    m = np.zeros((target_len, n_frames), dtype=dtype)
    if n_frames == 1:
        m[:, 0] = 1.0
        return m
    if target_len == 1:
        m[0, 0] = 1.0
        return m
    pos = np.arange(target_len) * (n_frames - 1) / (target_len - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_frames - 2)
    frac = pos - lo
    rows = np.arange(target_len)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def temporal_align(vf: Tensor | np.ndarray, target_len: int) -> Tensor:
    """Linearly resample per-frame features (…, N, d_v) to ``target_len`` time steps."""
    vf = K.as_tensor(vf)
    m = align_matrix(vf.shape[-2], target_len, vf.dtype)
    return K.matmul(Tensor(m), vf)


# -- file formats ---------------------------------------------------------

_VFT = struct.Struct("<4sIIf")
_VFR = struct.Struct("<4sIII")


def write_vft(path, features: np.ndarray, fps: float = 25.0) -> None:
    features = np.asarray(features, dtype="<f4")
    if features.ndim != 2:
        raise DimensionError(f"features must be N x d_v, got {features.shape}")
    n, d = features.shape
    atomic_write(path, lambda f: (f.write(_VFT.pack(b"VFT1", n, d, fps)), f.write(features.tobytes())))


def write_vfr(path, frames: np.ndarray) -> None:
    frames = np.asarray(frames, dtype="<f4")
    if frames.ndim != 3:
        raise DimensionError(f"frames must be N x H x W, got {frames.shape}")
    if np.any(frames < 0) or np.any(frames > 1):
        raise VisualFormatError("frame values must lie in [0, 1]")
    n, h, w = frames.shape
    atomic_write(path, lambda f: (f.write(_VFR.pack(b"VFR1", n, h, w)), f.write(frames.tobytes())))


def read_visual(path, fps: float = 25.0) -> VisualStream:
    """Load a ``.vft`` feature file or a ``.vfr`` frames file (dispatch on the magic)."""
    blob = Path(path).read_bytes()
    magic = blob[:4]
    if magic == b"VFT1":
        if len(blob) < _VFT.size:
            raise VisualFormatError(f"{path}: truncated header")
        _, n, d, file_fps = _VFT.unpack_from(blob)
        body = np.frombuffer(blob, dtype="<f4", offset=_VFT.size)
        if body.size != n * d:
            raise VisualFormatError(f"{path}: expected {n * d} values, found {body.size}")
        return VisualStream("features", body.reshape(n, d).astype(np.float64), float(file_fps))
    if magic == b"VFR1":
        if len(blob) < _VFR.size:
            raise VisualFormatError(f"{path}: truncated header")
        _, n, h, w = _VFR.unpack_from(blob)
        body = np.frombuffer(blob, dtype="<f4", offset=_VFR.size)
        if body.size != n * h * w:
            raise VisualFormatError(f"{path}: expected {n * h * w} values, found {body.size}")
        return VisualStream("frames", body.reshape(n, h, w).astype(np.float64), fps)
    raise VisualFormatError(f"{path}: unknown magic {magic!r} (expected VFT1 or VFR1)")
