"""The full audio-visual enhancement network."""

from __future__ import annotations

import numpy as np

from . import dsp
from .config import ModelConfig
from .encoders import AudioEncoder, VisualEncoder, VisualStream, temporal_align, visual_encode
from .kernel import DimensionError, Tensor, make_rng, no_grad
from .layers import Module
from .separator import Decoder, Separator, estimate_mask, reconstruct
from .xattn import CrossAttention

MASK_MODES = ("soft", "binary", "off")


class AVSEModel(Module):
    """encoders -> visual-biased attention -> dual-path separator -> decoder.

    ``forward`` returns the raw decoder waveform, which is what training
    optimises; :meth:`enhance` adds the mask-and-resynthesise stage.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        self.audio_encoder = self.add_child("audio_encoder", AudioEncoder(cfg, make_rng(seed, 1)))
        self.visual_encoder = self.add_child("visual_encoder", VisualEncoder(cfg, make_rng(seed, 2)))
        self.xattn = self.add_child("xattn", CrossAttention(cfg, make_rng(seed, 3)))
        self.separator = self.add_child("separator", Separator(cfg, make_rng(seed, 4)))
        self.decoder = self.add_child("decoder", Decoder(cfg, make_rng(seed, 5)))
        self.to(dtype)

    @property
    def dtype(self):
        return self.decoder.weight.dtype

    def stft_params(self) -> dsp.StftParams:
        return dsp.StftParams(self.cfg.stft_window, self.cfg.stft_hop)

    def visual_features(self, visual, mode: str = "features") -> Tensor:
        """(B, N, d_v) per-frame features from features (B, N, d_v) or frames (B, N, H, W)."""
        v = visual if isinstance(visual, Tensor) else Tensor(np.asarray(visual, dtype=self.dtype))
        if mode == "features":
            if v.ndim != 3 or v.shape[-1] != self.cfg.visual_dim:
                raise DimensionError(f"visual features must be (B, N, {self.cfg.visual_dim}), got {v.shape}")
            return v
        if mode == "frames":
            return self.visual_encoder(v)
        raise ValueError(f"visual mode must be 'features' or 'frames', got {mode!r}")

    def forward(self, noisy, visual, visual_mode: str = "features", training: bool = False,
                rng: np.random.Generator | None = None, return_attention: bool = False):
        """(B, T) noisy waveform + visual stream -> (B, T) raw estimate."""
        x = noisy if isinstance(noisy, Tensor) else Tensor(np.asarray(noisy, dtype=self.dtype))
        if x.ndim != 2:
            raise DimensionError(f"noisy audio must be (B, T), got {x.shape}")
        z = self.audio_encoder(x)
        t_lat = z.shape[2]
        xv = temporal_align(self.visual_features(visual, visual_mode), t_lat)
        fused = self.xattn(z.transpose(0, 2, 1), xv, return_weights=return_attention)
        fused, attn = fused if return_attention else (fused, None)
        feats = self.separator(fused, training, rng)
        out = self.decoder(feats, x.shape[1])
        return (out, attn) if return_attention else out

    __call__ = forward

    def encode_streams(self, noisy: np.ndarray, visual: VisualStream) -> tuple[np.ndarray, np.ndarray]:
        """Audio latent features (T x d_a) and aligned visual features (T x d_v) for one utterance."""
        with no_grad():
            z = self.audio_encoder(Tensor(np.asarray(noisy, dtype=self.dtype)[None]))
            vf = visual_encode(visual, self.cfg, self.visual_encoder, self.dtype)
            xv = temporal_align(vf, z.shape[2])
        return z.data[0].T.astype(np.float64), xv.data.astype(np.float64)

    def enhance(self, noisy: np.ndarray, visual: VisualStream, mask_mode: str = "soft") -> dict:
        """Enhance one utterance; returns the output waveform plus the raw estimate and mask."""
        if mask_mode not in MASK_MODES:
            raise ValueError(f"mask mode must be one of {MASK_MODES}, got {mask_mode!r}")
        noisy = np.asarray(noisy, dtype=np.float64)
        with no_grad():
            vf = visual_encode(visual, self.cfg, self.visual_encoder, self.dtype)
            s_raw = self.forward(noisy[None], vf.data[None].astype(self.dtype)).data[0].astype(np.float64)
        result = {"s_raw": s_raw, "mask": None, "output": s_raw}
        if mask_mode != "off":
            p = self.stft_params()
            m = estimate_mask(s_raw, noisy, p)
            result["mask"] = m
            result["output"] = reconstruct(noisy, m, p, mask_mode)
        return result
