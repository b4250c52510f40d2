"""Objective metrics: SI-SDR, STOI, binary-mask HIT/FA, and corpus reports."""

from __future__ import annotations

import csv
import io
import math
import shlex
import struct
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.signal import resample_poly

from . import dsp
from .dsp import atomic_write
from .kernel import DimensionError

# Constants of the original STOI algorithm (10 kHz internal rate).
STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150
STOI_SEG = 30
STOI_BETA = -15.0
STOI_DYN_RANGE = 40.0
_EPS = np.finfo(np.float64).eps


class DegenerateMaskError(ValueError):
    pass


def third_octave_matrix(fs: int = STOI_FS, nfft: int = STOI_NFFT, num_bands: int = STOI_BANDS,
                        min_freq: float = STOI_MIN_FREQ) -> np.ndarray:
    """(bands x bins) 0/1 matrix grouping DFT bins into 1/3-octave bands."""
    f = np.linspace(0, fs, nfft + 1)[:nfft // 2 + 1]
    k = np.arange(num_bands, dtype=float)
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((num_bands, len(f)))
    for i in range(num_bands):
        a = int(np.argmin((f - lo[i]) ** 2))
        b = int(np.argmin((f - hi[i]) ** 2))
        obm[i, a:b] = 1.0
    return obm


def antialias_window(up: int, down: int, rejection_db: float = 60.0) -> np.ndarray:
    """Kaiser-windowed sinc low-pass for rational resampling, normalised to unit DC gain.

    Same design as Octave's ``resample`` (cutoff at the lower Nyquist rate,
    transition width a tenth of the cutoff), which the reference STOI code uses.
    """
    g = math.gcd(up, down)
    up, down = up // g, down // g
    cutoff = 1.0 / (2 * max(up, down))
    width = cutoff / 10
    half = int(np.ceil((rejection_db - 8) / (28.714 * width)))
    t = np.arange(-half, half + 1)
    h = np.kaiser(2 * half + 1, 0.1102 * (rejection_db - 8.7)) * 2 * up * cutoff * np.sinc(2 * cutoff * t)
    return h / h.sum()


def resample(x: np.ndarray, rate: int, target: int) -> np.ndarray:
    g = math.gcd(target, rate)
    up, down = target // g, rate // g
    return resample_poly(x, up, down, window=antialias_window(up, down))


def _frames(x: np.ndarray, size: int, hop: int) -> np.ndarray:
    w = np.hanning(size + 2)[1:-1]
    starts = range(0, len(x) - size, hop)
    return np.array([w * x[i:i + size] for i in starts]).reshape(-1, size)


def remove_silent_frames(x: np.ndarray, y: np.ndarray, dyn_range: float = STOI_DYN_RANGE,
                         size: int = STOI_FRAME, hop: int = STOI_FRAME // 2) -> tuple[np.ndarray, np.ndarray]:
    """Drop frames more than ``dyn_range`` dB below the loudest frame of ``x`` (from both signals)."""
    xf, yf = _frames(x, size, hop), _frames(y, size, hop)
    energy = 20 * np.log10(np.linalg.norm(xf, axis=1) + _EPS)
    keep = (energy.max() - dyn_range - energy) < 0
    xf, yf = xf[keep], yf[keep]
    n = (len(xf) - 1) * hop + size if len(xf) else 0
    xs, ys = np.zeros(n), np.zeros(n)
    for i in range(len(xf)):
        xs[i * hop:i * hop + size] += xf[i]
        ys[i * hop:i * hop + size] += yf[i]
    return xs, ys


def stoi(clean: np.ndarray, proc: np.ndarray, rate: int = dsp.SAMPLE_RATE) -> float:
    """Short-time objective intelligibility (original, non-extended algorithm)."""
    x = np.asarray(clean, dtype=np.float64)
    y = np.asarray(proc, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"stoi: clean {x.shape} and processed {y.shape} differ")
    if rate != STOI_FS:
        x, y = resample(x, rate, STOI_FS), resample(y, rate, STOI_FS)
    x, y = remove_silent_frames(x, y)
    hop = STOI_FRAME // 2
    xs, ys = _frames(x, STOI_FRAME, hop), _frames(y, STOI_FRAME, hop)
    if len(xs) < STOI_SEG:
        raise dsp.SignalTooShortError(
            f"STOI needs at least {STOI_SEG} non-silent frames (~384 ms), got {len(xs)}")
    obm = third_octave_matrix()
    x_tob = np.sqrt(obm @ (np.abs(np.fft.rfft(xs, STOI_NFFT, axis=1)) ** 2).T)
    y_tob = np.sqrt(obm @ (np.abs(np.fft.rfft(ys, STOI_NFFT, axis=1)) ** 2).T)
    segs = range(STOI_SEG, x_tob.shape[1] + 1)
    xseg = np.array([x_tob[:, m - STOI_SEG:m] for m in segs])
    yseg = np.array([y_tob[:, m - STOI_SEG:m] for m in segs])
    norm = np.linalg.norm(xseg, axis=2, keepdims=True) / (np.linalg.norm(yseg, axis=2, keepdims=True) + _EPS)
    yp = np.minimum(yseg * norm, xseg * (1 + 10 ** (-STOI_BETA / 20)))
    yp = yp - yp.mean(axis=2, keepdims=True)
    xc = xseg - xseg.mean(axis=2, keepdims=True)
    yp /= np.linalg.norm(yp, axis=2, keepdims=True) + _EPS
    xc /= np.linalg.norm(xc, axis=2, keepdims=True) + _EPS
    return float(np.sum(yp * xc) / (xc.shape[0] * xc.shape[1]))


@dataclass(frozen=True)
class MaskScore:
    hit: float
    fa: float
    hit_minus_fa: float
    accuracy: float


def hit_fa(est: np.ndarray, ref: np.ndarray) -> MaskScore:
    """HIT = hits / reference ones, FA = false alarms / reference zeros, accuracy = bin agreement."""
    est = np.asarray(est).astype(bool)
    ref = np.asarray(ref).astype(bool)
    if est.shape != ref.shape:
        raise DimensionError(f"estimated mask {est.shape} and reference {ref.shape} differ")
    n_pos = int(ref.sum())
    n_neg = int(ref.size - n_pos)
    if n_pos == 0:
        raise DegenerateMaskError("HIT is undefined: the reference mask has no speech-dominant (1) bins")
    if n_neg == 0:
        raise DegenerateMaskError("FA is undefined: the reference mask has no noise-dominant (0) bins")
    hit = int((est & ref).sum()) / n_pos
    fa = int((est & ~ref).sum()) / n_neg
    acc = int((est == ref).sum()) / ref.size
    return MaskScore(hit, fa, hit - fa, acc)


# -- mask files -----------------------------------------------------------------

_MSK = struct.Struct("<4sII")


def write_mask(path, mask: np.ndarray) -> None:
    """``MSK1`` magic, u32 frames, u32 bins, then frames*bins bytes of 0/1."""
    m = np.asarray(mask)
    if m.ndim != 2 or not np.isin(m, (0, 1)).all():
        raise ValueError("mask must be a 2-D array of 0/1 values")
    atomic_write(path, lambda f: (f.write(_MSK.pack(b"MSK1", *m.shape)), f.write(m.astype(np.uint8).tobytes())))


def read_mask(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < _MSK.size or blob[:4] != b"MSK1":
        raise ValueError(f"{path}: not a mask file")
    _, t, f = _MSK.unpack_from(blob)
    body = np.frombuffer(blob, dtype=np.uint8, offset=_MSK.size)
    if body.size != t * f:
        raise ValueError(f"{path}: expected {t * f} mask values, found {body.size}")
    return body.reshape(t, f).copy()


# -- corpus reports ---------------------------------------------------------------

REPORT_FIELDS = ["utt", "cond", "snr_db", "si_sdr_noisy", "si_sdr_enh", "stoi_noisy", "stoi_enh",
                 "hit", "fa", "hit_fa", "acc", "pesq"]
NUMERIC_FIELDS = REPORT_FIELDS[2:]


def pesq_hook(command: str, clean: np.ndarray, enhanced: np.ndarray, rate: int = dsp.SAMPLE_RATE) -> float:
    """Run an external PESQ tool: ``command`` gets ``{ref}`` and ``{deg}`` WAV paths and prints a number."""
    with tempfile.TemporaryDirectory() as d:
        ref, deg = Path(d) / "ref.wav", Path(d) / "deg.wav"
        dsp.write_wav(ref, clean, "float32", rate)
        dsp.write_wav(deg, enhanced, "float32", rate)
        argv = [a.format(ref=ref, deg=deg) for a in shlex.split(command)]
        res = subprocess.run(argv, capture_output=True, text=True, check=True)
    return float(res.stdout.strip().split()[-1])


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    errors: list[tuple[str, str]] = field(default_factory=list)

    def aggregate(self) -> list[dict]:
        """Per-condition means followed by the overall mean (``cond='all'``)."""
        groups: dict[str, list[dict]] = {}
        for r in self.rows:
            groups.setdefault(r["cond"], []).append(r)
        out = []
        for cond, rows in sorted(groups.items()) + [("all", self.rows)]:
            if not rows:
                continue
            agg = {"utt": "MEAN", "cond": cond}
            for k in NUMERIC_FIELDS:
                vals = np.array([r[k] for r in rows], dtype=np.float64)
                agg[k] = float(np.mean(vals))
            out.append(agg)
        return out

    def deltas(self) -> dict[str, float]:
        """Enhanced minus noisy means (the "improvement" columns)."""
        if not self.rows:
            return {}
        overall = self.aggregate()[-1]
        return {"si_sdr": overall["si_sdr_enh"] - overall["si_sdr_noisy"],
                "stoi": overall["stoi_enh"] - overall["stoi_noisy"]}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        for r in self.rows + self.aggregate():
            w.writerow([_fmt(r[k]) for k in REPORT_FIELDS])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        text = self.to_csv().encode("utf-8")
        atomic_write(path, lambda f: f.write(text))


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    return f"{v:.6g}"


def _safe_stoi(clean, sig) -> float:
    try:
        return stoi(clean, sig)
    except dsp.SignalTooShortError:
        return float("nan")


def evaluate_item(item: dict, pesq_cmd: str | None = None) -> dict:
    """One report row. ``item`` needs utt, cond, snr_db, clean, noisy, enhanced and optionally est_mask/ref_mask."""
    clean, noisy, enh = (np.asarray(item[k], dtype=np.float64) for k in ("clean", "noisy", "enhanced"))
    if not (clean.shape == noisy.shape == enh.shape):
        raise DimensionError(f"length mismatch: clean {clean.shape}, noisy {noisy.shape}, enhanced {enh.shape}")
    row = {"utt": item["utt"], "cond": item.get("cond", ""), "snr_db": float(item.get("snr_db", float("nan"))),
           "si_sdr_noisy": dsp.cap_db(dsp.si_sdr(clean, noisy)),
           "si_sdr_enh": dsp.cap_db(dsp.si_sdr(clean, enh)),
           "stoi_noisy": _safe_stoi(clean, noisy), "stoi_enh": _safe_stoi(clean, enh)}
    if item.get("est_mask") is not None and item.get("ref_mask") is not None:
        s = hit_fa(item["est_mask"], item["ref_mask"])
        row.update(hit=s.hit, fa=s.fa, hit_fa=s.hit_minus_fa, acc=s.accuracy)
    else:
        row.update(hit=float("nan"), fa=float("nan"), hit_fa=float("nan"), acc=float("nan"))
    row["pesq"] = pesq_hook(pesq_cmd, clean, enh) if pesq_cmd else float("nan")
    return row


def evaluate_corpus(items: Iterable[dict], pesq_cmd: str | None = None) -> EvalReport:
    """Evaluate items in the given order; failures are logged per item and skipped."""
    report = EvalReport()
    for item in items:
        utt = str(item.get("utt", "?"))
        if item.get("error"):
            report.errors.append((utt, str(item["error"])))
            continue
        try:
            report.rows.append(evaluate_item(item, pesq_cmd))
        except (ValueError, OSError, subprocess.CalledProcessError) as exc:
            report.errors.append((utt, str(exc)))
    return report
