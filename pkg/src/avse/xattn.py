"""Multi-head self-attention over audio frames with an additive visual bias.

Scores are ``S = Q K^T / sqrt(d_h)``; the visual stream is projected to one
scalar per (head, key frame), added to every query row of ``S``, and the
softmax runs over the key axis.
"""

from __future__ import annotations

import numpy as np

from . import kernel as K
from .config import ModelConfig
from .kernel import DimensionError, Tensor
from .layers import Module, fan_in_uniform


class AlignmentError(DimensionError):
    pass


class CrossAttention(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        d_a, d_v, h = cfg.enc_channels, cfg.visual_dim, cfg.heads
        self.heads = h
        self.residual = cfg.attn_residual
        self.w_q = self.add_param("w_q", fan_in_uniform(rng, (d_a, d_a)))
        self.w_k = self.add_param("w_k", fan_in_uniform(rng, (d_a, d_a)))
        self.w_v = self.add_param("w_v", fan_in_uniform(rng, (d_a, d_a)))
        self.w_vis = self.add_param("w_vis", fan_in_uniform(rng, (h, d_v)))
        self.w_out = self.add_param("w_out", fan_in_uniform(rng, (d_a, d_a)))

    @property
    def d_a(self) -> int:
        return self.w_q.shape[0]

    def split_heads(self, x: Tensor) -> Tensor:
        B, T, D = x.shape
        return x.reshape(B, T, self.heads, D // self.heads).transpose(0, 2, 1, 3)

    @staticmethod
    def merge_heads(x: Tensor) -> Tensor:
        B, h, T, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, T, h * dh)

    def project_qkv(self, x_a: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """(B, T, d_a) -> Q, K, V each (B, h, T, d_h)."""
        if x_a.ndim != 3 or x_a.shape[-1] != self.d_a:
            raise DimensionError(f"audio features must be (B, T, {self.d_a}), got {x_a.shape}")
        return tuple(self.split_heads(K.linear(x_a, w)) for w in (self.w_q, self.w_k, self.w_v))

    def project_visual_bias(self, x_v: Tensor, t_audio: int | None = None) -> Tensor:
        """(B, T, d_v) -> (B, h, T), one bias per head and key frame."""
        if x_v.ndim != 3 or x_v.shape[-1] != self.w_vis.shape[1]:
            raise DimensionError(f"visual features must be (B, T, {self.w_vis.shape[1]}), got {x_v.shape}")
        if t_audio is not None and x_v.shape[1] != t_audio:
            raise AlignmentError(f"visual stream has {x_v.shape[1]} frames, audio has {t_audio}; align first")
        return K.linear(x_v, self.w_vis).transpose(0, 2, 1)

    def attend(self, q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None, x_a: Tensor | None = None,
               return_weights: bool = False):
        """Biased attention, head merge and output projection -> (B, d_a, T)."""
        res = K.attention(q, k, v, bias, return_weights=return_weights)
        o, a = res if return_weights else (res, None)
        out = K.linear(self.merge_heads(o), self.w_out)
        if self.residual and x_a is not None:
            out = out + x_a
        out = out.transpose(0, 2, 1)
        return (out, a) if return_weights else out

    def __call__(self, x_a: Tensor, x_v: Tensor | None, return_weights: bool = False):
        """Fuse audio (B, T, d_a) with aligned visual features (B, T, d_v); ``x_v=None`` drops the bias."""
        q, k, v = self.project_qkv(x_a)
        bias = None if x_v is None else self.project_visual_bias(x_v, x_a.shape[1])
        return self.attend(q, k, v, bias, x_a, return_weights)


def attention_weights_reference(q: np.ndarray, k: np.ndarray, bias: np.ndarray | None) -> np.ndarray:
    """Unfused softmax(QK^T/sqrt(d_h) + bias) built from the generic kernel ops."""
    s = K.matmul(Tensor(q), Tensor(np.swapaxes(k, -1, -2))) * (1.0 / np.sqrt(q.shape[-1]))
    if bias is not None:
        s = s + Tensor(bias[..., None, :])
    return K.softmax(s, axis=-1).data
