from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from avse import dsp
from avse import kernel as K
from avse.encoders import AudioEncoder
from avse.kernel import DimensionError, Tensor, gradcheck, make_rng
from avse.separator import (Decoder, DualPathBlock, EstimatedMask, Separator, chunk, chunk_layout, estimate_mask,
                            oracle_ibm, reconstruct, unchunk)
from avse.training import mix_at_snr

P = dsp.StftParams()


@given(st.integers(1, 300), st.integers(2, 70), st.integers(0, 2**31 - 1))
def test_chunk_round_trip(T, L, seed):
    x = make_rng(seed).standard_normal((2, 3, T))
    y = chunk(Tensor(x), L)
    S, hop, _ = chunk_layout(T, L)
    assert y.shape == (2, 3, S, L)
    assert np.allclose(unchunk(y, T).data, x, rtol=0, atol=1e-15)


def test_chunk_unchunk_gradients(rng):
    x = Tensor(rng.standard_normal((1, 2, 21)), requires_grad=True)
    w = Tensor(rng.standard_normal((1, 2, 21)))
    assert gradcheck(lambda: (unchunk(chunk(x, 8) * 1.5, 21) * w).sum(), [x]) <= 1e-6


def test_unchunk_wrong_layout():
    with pytest.raises(DimensionError):
        unchunk(Tensor(np.zeros((1, 1, 5, 8))), 10)


def _zero_block(cfg):
    blk = DualPathBlock(cfg, make_rng(0))
    for _, t in blk.intra.named_parameters():
        t.data[:] = 0
    for _, t in blk.inter.named_parameters():
        t.data[:] = 0
    return blk


def test_zero_weight_block_is_identity(tiny_cfg, rng):
    x = Tensor(rng.standard_normal((2, 3, 8, tiny_cfg.enc_channels)))
    out = _zero_block(tiny_cfg)(x, training=False)
    assert np.max(np.abs(out.data - x.data)) <= 1e-6


@given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.integers(2, 9))
def test_block_preserves_shape(seed, S, L):
    from avse.config import preset

    cfg = preset("tiny")[0]
    x = Tensor(make_rng(seed).standard_normal((1, cfg.enc_channels, S, L)))
    assert DualPathBlock(cfg, make_rng(seed)).forward_bcsl(x).shape == x.shape


def test_block_gradient(tiny_cfg):
    cfg = replace(tiny_cfg, enc_channels=6, hidden=6, proj=4, heads=2)
    blk = DualPathBlock(cfg, make_rng(1))
    x = Tensor(make_rng(2).standard_normal((1, 3, 4, 6)), requires_grad=True)
    w = Tensor(make_rng(3).standard_normal((1, 3, 4, 6)))
    f = lambda: (blk(x, training=True, rng=make_rng(9)) * w).sum()
    assert gradcheck(f, [x] + blk.parameters()) <= 1e-4


def test_paper_separator_shape(paper_cfg):
    sep = Separator(paper_cfg, make_rng(0))
    assert len(sep.blocks) == 6
    out = sep(Tensor(make_rng(1).standard_normal((1, 256, 1999)).astype(np.float32)))
    assert out.shape == (1, 128, 1999)
    assert out.data.min() >= 0


def test_tiny_separator_shape_and_zero(tiny_cfg):
    sep = Separator(tiny_cfg, make_rng(0))
    out = sep(Tensor(make_rng(1).standard_normal((2, 32, 150))))
    assert out.shape == (2, 16, 150) and out.data.min() >= 0


def test_separator_zero_in_zero_out_bias_free(tiny_cfg):
    sep = Separator(tiny_cfg, make_rng(0))
    for blk in sep.blocks:
        for gru in (blk.intra, blk.inter):
            gru.b_ih.data[:] = 0
            gru.b_hh.data[:] = 0
    assert not sep(Tensor(np.zeros((1, 32, 70)))).data.any()


def test_decoder_length_and_zero(paper_cfg, tiny_cfg):
    dec = Decoder(paper_cfg, make_rng(0))
    assert dec(Tensor(np.ones((1, 128, 1999), np.float32)), 16000).shape == (1, 16000)
    d = Decoder(tiny_cfg, make_rng(0))
    assert d(Tensor(np.ones((1, 16, 10))), 100).shape == (1, 100)
    assert d(Tensor(np.ones((1, 16, 10))), 60).shape == (1, 60)
    assert not d(Tensor(np.zeros((1, 16, 10))), 88).data.any()


def test_decoder_is_encoder_adjoint(tiny_cfg, rng):
    cfg = replace(tiny_cfg, proj=tiny_cfg.enc_channels)
    enc, dec = AudioEncoder(cfg, make_rng(0)), Decoder(cfg, make_rng(1))
    dec.weight.data = enc.weight.data.copy()
    x = rng.standard_normal((1, 16000))
    f = rng.standard_normal((1, cfg.enc_channels, 1999))
    lin = K.conv1d(Tensor(x[:, None]), enc.weight, cfg.enc_stride).data
    lhs = np.sum(lin * f)
    rhs = np.sum(x * dec(Tensor(f), 16000).data)
    assert abs(lhs - rhs) <= 1e-10 * abs(lhs)


# -- masks ------------------------------------------------------------------------

def _mixture(seed=0, snr=0.0, n=16000):
    r = make_rng(seed)
    t = np.arange(n) / 16000
    clean = 0.5 * np.sin(2 * np.pi * 440 * t) + 0.3 * np.sin(2 * np.pi * 1250 * t)
    noisy, noise = mix_at_snr(clean, r.standard_normal(n), snr)
    return clean, noise, noisy


def test_estimate_mask_trivial_cases(rng):
    y = rng.standard_normal(4000)
    m = estimate_mask(y, y, P)
    assert np.all(m.soft == 1.0) and np.all(m.binary == 1)
    m0 = estimate_mask(np.zeros(4000), y, P)
    assert not m0.binary.any()
    with pytest.raises(DimensionError):
        estimate_mask(y[:-1], y, P)


def test_estimate_mask_from_clean_matches_ibm():
    clean, noise, noisy = _mixture()
    m = estimate_mask(clean, noisy, P)
    ref = oracle_ibm(clean, noise, P)
    S = np.abs(dsp.stft(clean, P, pad=dsp.analysis_pad(P)).values)
    N = np.abs(dsp.stft(noise, P, pad=dsp.analysis_pad(P)).values)
    valid = S != N
    assert np.mean(m.binary[valid] == ref[valid]) >= 0.99


@given(st.integers(0, 2**31 - 1))
def test_mask_invariants(seed):
    r = make_rng(seed)
    noisy = r.standard_normal(3000)
    m = estimate_mask(r.standard_normal(3000) * r.uniform(0, 2), noisy, P)
    assert m.soft.min() >= 0 and m.soft.max() <= 1
    assert np.array_equal(m.binary, (m.soft > 0.5).astype(np.uint8))


def test_reconstruct_all_ones_and_modes(rng):
    y = rng.standard_normal(8000)
    ones = np.ones_like(estimate_mask(y, y, P).soft)
    assert np.max(np.abs(reconstruct(y, ones, P) - y)) <= 1e-10 * np.max(np.abs(y))
    m = estimate_mask(0.6 * y + 0.3 * rng.standard_normal(8000), y, P)
    soft, binary = m.select("soft"), m.select("binary")
    crisp = (m.soft == 0) | (m.soft == 1)
    assert np.array_equal(soft[crisp], binary[crisp])
    assert np.all((soft != binary) <= ((m.soft > 0) & (m.soft < 1)))
    with pytest.raises(ValueError):
        m.select("off")


def test_oracle_ibm_gain():
    gains = []
    for seed in range(5):
        clean, noise, noisy = _mixture(seed)
        enh = reconstruct(noisy, oracle_ibm(clean, noise, P), P)
        gains.append(dsp.si_sdr(clean, enh) - dsp.si_sdr(clean, noisy))
    assert np.mean(gains) >= 5.0
