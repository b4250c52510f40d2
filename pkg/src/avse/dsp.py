"""STFT analysis/resynthesis, binary masks, SI-SDR and WAV I/O."""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.io import wavfile

from .kernel import DimensionError, InputTooShortError, Tensor

SAMPLE_RATE = 16000
SDR_CAP_DB = 60.0
LOSS_CLIP_DB = -30.0


class SignalTooShortError(InputTooShortError):
    pass


class StftConfigError(ValueError):
    pass


class MaskDomainError(ValueError):
    pass


class UndefinedReferenceError(ValueError):
    pass


class WavFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.rate <= 0:
            raise WavFormatError(f"sample rate must be positive, got {self.rate}")
        if not np.all(np.isfinite(self.samples)):
            raise WavFormatError("waveform contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.rate


@dataclass(frozen=True)
class StftParams:
    window_len: int = 512
    hop: int = 256
    window: str = "hann"

    def __post_init__(self):
        if not 0 < self.hop <= self.window_len:
            raise StftConfigError(f"need 0 < hop <= window_len, got hop={self.hop}, window_len={self.window_len}")

    @property
    def bins(self) -> int:
        return self.window_len // 2 + 1

    def taper(self) -> np.ndarray:
        return signal.get_window(self.window, self.window_len, fftbins=True)

    def is_cola(self) -> bool:
        return bool(signal.check_COLA(self.taper(), self.window_len, self.window_len - self.hop))


@dataclass
class Spectrogram:
    """Complex STFT matrix (frames x bins).

    ``pad`` leading samples were prepended before analysis and ``length`` is
    the original signal length, so that :func:`istft` can trim back exactly.
    """

    values: np.ndarray
    params: StftParams
    length: int
    pad: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def bins(self) -> int:
        return self.values.shape[1]

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)

    def with_values(self, values: np.ndarray) -> "Spectrogram":
        return Spectrogram(values, self.params, self.length, self.pad)


def stft(x: np.ndarray, p: StftParams = StftParams(), pad: int = 0) -> Spectrogram:
    """Windowed DFT of every full frame; ``floor((len - window_len) / hop) + 1`` frames.

    With ``pad > 0`` the signal is zero-padded by ``pad`` on the left and by
    at least ``pad`` on the right (rounded up to a whole hop), which lets
    :func:`istft` cover every original sample.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError(f"stft expects a 1-D signal, got shape {x.shape}")
    length = len(x)
    if pad:
        total = length + 2 * pad
        extra = (-(total - p.window_len)) % p.hop if total >= p.window_len else p.window_len - total
        x = np.concatenate([np.zeros(pad), x, np.zeros(pad + extra)])
    if len(x) < p.window_len:
        raise SignalTooShortError(f"signal of {len(x)} samples is shorter than the {p.window_len}-sample window")
    frames = np.lib.stride_tricks.sliding_window_view(x, p.window_len)[::p.hop]
    values = np.fft.rfft(frames * p.taper(), axis=-1)
    return Spectrogram(values, p, length, pad)


def istft(s: Spectrogram) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`; exact wherever the summed squared window is non-zero."""
    p = s.params
    if not p.is_cola():
        raise StftConfigError(f"window {p.window!r} with length {p.window_len} and hop {p.hop} is not COLA")
    win = p.taper()
    frames = np.fft.irfft(s.values, n=p.window_len, axis=-1) * win
    n = (s.frames - 1) * p.hop + p.window_len
    out = np.zeros(n)
    norm = np.zeros(n)
    for i in range(s.frames):
        out[i * p.hop:i * p.hop + p.window_len] += frames[i]
        norm[i * p.hop:i * p.hop + p.window_len] += win * win
    nz = norm > 1e-10
    out[nz] /= norm[nz]
    out[~nz] = 0.0
    out = out[s.pad:s.pad + s.length]
    if len(out) < s.length:
        out = np.concatenate([out, np.zeros(s.length - len(out))])
    return out


def analysis_pad(p: StftParams) -> int:
    """Edge padding for :func:`stft` so that :func:`istft` covers every sample.

    ``window_len - hop`` is the smallest pad that does so while keeping real
    samples in every frame (no frame made purely of padding).
    """
    return max(p.window_len - p.hop, 1)


def ibm(clean: Spectrogram | np.ndarray, noise: Spectrogram | np.ndarray) -> np.ndarray:
    """Ideal binary mask: 1 where the clean magnitude strictly exceeds the noise magnitude."""
    c = clean.values if isinstance(clean, Spectrogram) else np.asarray(clean)
    n = noise.values if isinstance(noise, Spectrogram) else np.asarray(noise)
    if c.shape != n.shape:
        raise DimensionError(f"ibm: clean {c.shape} and noise {n.shape} differ")
    return (np.abs(c) > np.abs(n)).astype(np.uint8)


def apply_mask(noisy: Spectrogram, m: np.ndarray) -> Spectrogram:
    """Scale the noisy magnitudes by ``m`` in [0, 1], keeping the noisy phase."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != noisy.values.shape:
        raise DimensionError(f"mask {m.shape} does not match spectrogram {noisy.values.shape}")
    if np.any(m < 0) or np.any(m > 1) or not np.all(np.isfinite(m)):
        raise MaskDomainError("mask values must lie in [0, 1]")
    return noisy.with_values(noisy.values * m)


def si_sdr(x: np.ndarray, xhat: np.ndarray, scale_invariant: bool = True) -> float:
    """SI-SDR in dB; +inf for a perfect (scaled) estimate, -inf for zero projection.

    The reference is optimally scaled onto the estimate. ``scale_invariant=False``
    evaluates the plain energy ratio ||x||^2 / ||x - xhat||^2 instead.
    """
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise DimensionError(f"si_sdr: reference {x.shape} and estimate {xhat.shape} differ")
    ref_energy = float(x @ x)
    if ref_energy == 0.0:
        raise UndefinedReferenceError("SI-SDR is undefined for an all-zero reference")
    alpha = float(xhat @ x) / ref_energy if scale_invariant else 1.0
    target = alpha * x
    resid = xhat - target
    num = float(target @ target)
    den = float(resid @ resid)
    if num == 0.0:
        return -np.inf
    if den == 0.0:
        return np.inf
    return 10.0 * np.log10(num / den)


def cap_db(v: float, cap: float = SDR_CAP_DB) -> float:
    return float(np.clip(v, -cap, cap))


def si_sdr_loss(x, xhat: Tensor, clip_db: float = LOSS_CLIP_DB, cap: float = SDR_CAP_DB) -> Tensor:
    """Mean over the batch of ``-clip(SI-SDR, clip_db, cap)``.

    ``x`` is the clean reference (array, T or B x T), ``xhat`` the estimate
    tensor of matching shape. Gradients vanish where the clip is active.
    """
    ref = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=xhat.dtype)
    y = xhat.data
    if ref.shape != y.shape:
        raise DimensionError(f"si_sdr_loss: reference {ref.shape} and estimate {y.shape} differ")
    squeeze = y.ndim == 1
    if squeeze:
        ref, y = ref[None], y[None]
    q = np.einsum("bt,bt->b", ref, ref)
    if np.any(q == 0):
        raise UndefinedReferenceError("SI-SDR is undefined for an all-zero reference")
    pr = np.einsum("bt,bt->b", y, ref)
    r = np.einsum("bt,bt->b", y, y)
    tt = pr * pr / q
    ee = r - tt
    with np.errstate(divide="ignore", invalid="ignore"):
        sdr = 10.0 * (np.log10(tt) - np.log10(ee))
    sdr = np.where(tt <= 0, -np.inf, np.where(ee <= 0, np.inf, sdr))
    active = (sdr > clip_db) & (sdr < cap)
    loss = -np.clip(sdr, clip_db, cap).mean()
    B = len(y)

    def bw(g):
        k = 10.0 / np.log(10.0)
        grad = np.zeros_like(y)
        a = active
        if np.any(a):
            d = (2 * ref[a] / pr[a, None]
                 - (2 * y[a] - 2 * (pr[a] / q[a])[:, None] * ref[a]) / ee[a, None])
            grad[a] = -k * d / B
        grad = grad * g
        return (grad[0] if squeeze else grad,)

    return Tensor.from_op(np.asarray(loss, dtype=xhat.dtype), (xhat,), bw, "si_sdr_loss")


# -- WAV I/O --------------------------------------------------------------

def read_wav(path: str | os.PathLike, rate: int = SAMPLE_RATE) -> Waveform:
    """Mono PCM-16 or float-32 WAV at ``rate`` Hz; anything else is rejected."""
    try:
        sr, data = wavfile.read(path)
    except ValueError as exc:
        raise WavFormatError(f"{path}: not a readable WAV file ({exc})") from exc
    if sr != rate:
        raise WavFormatError(f"{path}: sample rate {sr} Hz, expected {rate} Hz (resampling is not supported)")
    if data.ndim != 1:
        raise WavFormatError(f"{path}: {data.shape[1]} channels, only mono is supported")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise WavFormatError(f"{path}: sample format {data.dtype} unsupported (PCM-16 or float-32 only)")
    return Waveform(samples, sr)


def write_wav(path: str | os.PathLike, w: Waveform | np.ndarray, fmt: str = "float32",
              rate: int = SAMPLE_RATE) -> None:
    """Write atomically (temp file + rename) as ``float32`` or ``pcm16``."""
    if isinstance(w, Waveform):
        samples, rate = w.samples, w.rate
    else:
        samples = np.asarray(w)
    if fmt == "float32":
        data = samples.astype(np.float32)
    elif fmt == "pcm16":
        data = np.clip(np.round(samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise WavFormatError(f"unknown WAV sample format {fmt!r}")
    atomic_write(path, lambda f: wavfile.write(f, rate, data))


def atomic_write(path: str | os.PathLike, writer) -> None:
    """Call ``writer(fileobj)`` on a temp file in the target directory, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            writer(f)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
