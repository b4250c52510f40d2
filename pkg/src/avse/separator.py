"""Dual-path GRU separator, transposed-conv decoder and mask-based resynthesis."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dsp
from . import kernel as K
from .config import ModelConfig
from .kernel import DimensionError, Tensor
from .layers import Module, fan_in_uniform, uniform

MASK_EPS = 1e-8


def chunk_layout(T: int, L: int) -> tuple[int, int, int]:
    """(chunks S, hop, padded length) for 50%-overlap chunking of length ``T``."""
    hop = L // 2
    S = 1 if T <= L else -(-(T - L) // hop) + 1
    return S, hop, (S - 1) * hop + L


def chunk(x: Tensor, L: int) -> Tensor:
    """(B, C, T) -> (B, C, S, L) overlapping chunks, zero-padded tail."""
    B, C, T = x.shape
    S, hop, P = chunk_layout(T, L)
    idx = np.arange(S)[:, None] * hop + np.arange(L)[None, :]
    xp = np.zeros((B, C, P), dtype=x.dtype)
    xp[:, :, :T] = x.data

    def bw(g):
        acc = np.zeros((B, C, P), dtype=g.dtype)
        for s in range(S):
            acc[:, :, s * hop:s * hop + L] += g[:, :, s]
        return (acc[:, :, :T],)

    return Tensor.from_op(xp[:, :, idx], (x,), bw, "chunk")


def unchunk(y: Tensor, T: int) -> Tensor:
    """Overlap-average (B, C, S, L) chunks back to (B, C, T)."""
    B, C, S, L = y.shape
    S_expect, hop, P = chunk_layout(T, L)
    if S != S_expect:
        raise DimensionError(f"{S} chunks cannot come from length {T} with chunk length {L}")
    acc = np.zeros((B, C, P), dtype=y.dtype)
    count = np.zeros(P, dtype=y.dtype)
    for s in range(S):
        acc[:, :, s * hop:s * hop + L] += y.data[:, :, s]
        count[s * hop:s * hop + L] += 1
    out = acc[:, :, :T] / count[:T]
    idx = np.arange(S)[:, None] * hop + np.arange(L)[None, :]

    def bw(g):
        gp = np.zeros((B, C, P), dtype=g.dtype)
        gp[:, :, :T] = g / count[:T]
        return (gp[:, :, idx],)

    return Tensor.from_op(out, (y,), bw, "unchunk")


class GRU(Module):
    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        bound = 1.0 / np.sqrt(hidden)
        self.w_ih = self.add_param("w_ih", uniform(rng, (3 * hidden, d_in), bound))
        self.w_hh = self.add_param("w_hh", uniform(rng, (3 * hidden, hidden), bound))
        self.b_ih = self.add_param("b_ih", uniform(rng, (3 * hidden,), bound))
        self.b_hh = self.add_param("b_hh", uniform(rng, (3 * hidden,), bound))

    def __call__(self, x: Tensor) -> Tensor:
        return K.gru_sequence(x, self.w_ih, self.w_hh, self.b_ih, self.b_hh)


class DualPathBlock(Module):
    """Intra-chunk GRU then inter-chunk GRU, each followed by layer norm and a residual add.

    Internally works on (B, S, L, C); :meth:`forward_bcsl` accepts the (B, C, S, L) layout.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        C, H = cfg.enc_channels, cfg.hidden
        self.p = cfg.dropout
        self.intra = self.add_child("intra", GRU(C, H, rng))
        self.inter = self.add_child("inter", GRU(C, H, rng))
        self.intra_g = self.add_param("intra_norm.gamma", np.ones(H))
        self.intra_b = self.add_param("intra_norm.beta", np.zeros(H))
        self.inter_g = self.add_param("inter_norm.gamma", np.ones(H))
        self.inter_b = self.add_param("inter_norm.beta", np.zeros(H))

    def __call__(self, x: Tensor, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        B, S, L, C = x.shape
        u = self.intra(x.reshape(B * S, L, C))
        u = K.layer_norm(K.dropout(u, self.p, training, rng), self.intra_g, self.intra_b)
        x = x + u.reshape(B, S, L, C)
        v = self.inter(x.transpose(0, 2, 1, 3).reshape(B * L, S, C))
        v = K.layer_norm(K.dropout(v, self.p, training, rng), self.inter_g, self.inter_b)
        return x + v.reshape(B, L, S, C).transpose(0, 2, 1, 3)

    def forward_bcsl(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        return self(x.transpose(0, 2, 3, 1), training, rng).transpose(0, 3, 1, 2)


class Separator(Module):
    """chunk -> dual-path blocks -> overlap-average -> 1x1 projection -> ReLU."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.blocks = [self.add_child(f"block{i}", DualPathBlock(cfg, rng)) for i in range(cfg.blocks)]
        self.w_proj = self.add_param("proj.weight", fan_in_uniform(rng, (cfg.proj, cfg.hidden)))

    def __call__(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        """(B, d_a, T) -> (B, proj, T), non-negative."""
        if x.ndim != 3 or x.shape[1] != self.cfg.enc_channels:
            raise DimensionError(f"separator expects (B, {self.cfg.enc_channels}, T), got {x.shape}")
        T = x.shape[2]
        y = chunk(x, self.cfg.chunk_len).transpose(0, 2, 3, 1)
        for block in self.blocks:
            y = block(y, training, rng)
        y = unchunk(y.transpose(0, 3, 1, 2), T)
        y = K.relu(K.linear(y.transpose(0, 2, 1), self.w_proj))
        return y.transpose(0, 2, 1)


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.weight = self.add_param("weight", fan_in_uniform(rng, (cfg.proj, 1, cfg.enc_kernel)))

    def __call__(self, features: Tensor, length: int) -> Tensor:
        """(B, proj, T_latent) -> (B, length) waveform, trimmed or zero-padded."""
        y = K.conv_transpose1d(features, self.weight, self.cfg.enc_stride)
        B, _, n = y.shape
        y = y.reshape(B, n)
        if n >= length:
            return y[:, :length]
        return K.pad(y, [(0, 0), (0, length - n)])


# -- masking ----------------------------------------------------------------

@dataclass
class EstimatedMask:
    soft: np.ndarray
    binary: np.ndarray
    params: dsp.StftParams
    length: int

    def select(self, mode: str) -> np.ndarray:
        if mode == "soft":
            return self.soft
        if mode == "binary":
            return self.binary.astype(np.float64)
        raise ValueError(f"mask mode must be 'soft' or 'binary', got {mode!r}")


def analyze(x: np.ndarray, p: dsp.StftParams) -> dsp.Spectrogram:
    """STFT with edge padding so resynthesis covers every sample."""
    return dsp.stft(x, p, pad=dsp.analysis_pad(p))


def estimate_mask(s_raw: np.ndarray, noisy: np.ndarray, p: dsp.StftParams = dsp.StftParams()) -> EstimatedMask:
    """Soft ratio |S|/|Y| clipped to [0, 1]; binary keeps bins where soft > 0.5."""
    s_raw = np.asarray(s_raw, dtype=np.float64)
    noisy = np.asarray(noisy, dtype=np.float64)
    if s_raw.shape != noisy.shape:
        raise DimensionError(f"estimate {s_raw.shape} and noisy {noisy.shape} lengths differ")
    S = analyze(s_raw, p).magnitude
    Y = analyze(noisy, p).magnitude
    soft = np.clip(S / np.maximum(Y, MASK_EPS), 0.0, 1.0)
    return EstimatedMask(soft, (soft > 0.5).astype(np.uint8), p, len(noisy))


def reconstruct(noisy: np.ndarray, mask: EstimatedMask | np.ndarray, p: dsp.StftParams = dsp.StftParams(),
                mode: str = "soft") -> np.ndarray:
    """Masked noisy magnitude with noisy phase, resynthesised to the input length."""
    m = mask.select(mode) if isinstance(mask, EstimatedMask) else np.asarray(mask, dtype=np.float64)
    Y = analyze(np.asarray(noisy, dtype=np.float64), p)
    return dsp.istft(dsp.apply_mask(Y, m))


def oracle_ibm(clean: np.ndarray, noise: np.ndarray, p: dsp.StftParams = dsp.StftParams()) -> np.ndarray:
    """Ground-truth binary mask on the same framing as :func:`estimate_mask`."""
    return dsp.ibm(analyze(clean, p), analyze(noise, p))
