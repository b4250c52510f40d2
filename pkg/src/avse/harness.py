"""Performance accounting (parameters, memory, real-time factor) and cross-modal diagnostics."""

from __future__ import annotations

import contextlib
import csv
import io
import os
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .config import ModelConfig
from .dsp import atomic_write
from .encoders import VisualStream
from .kernel import DimensionError
from .layers import Module

# Reported size of the reference model (parameters, MB of weights).
REFERENCE_PARAMS = 5.90e6
REFERENCE_MEMORY_MB = 23.54


def worker_count(default: int = 1) -> int:
    """Thread/worker cap from ``AVSE_THREADS`` (benchmarks default to one thread)."""
    try:
        n = int(os.environ.get("AVSE_THREADS", default))
    except ValueError:
        n = default
    return max(1, n)


def thread_limit(n: int | None = None):
    """Context manager pinning BLAS pools to ``n`` threads; a no-op without threadpoolctl."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return contextlib.nullcontext()
    return threadpool_limits(limits=n or worker_count())


@dataclass
class BenchReport:
    param_count: int
    weight_bytes: int
    weight_bytes_f32: int
    peak_activation_bytes: int
    rtf: float | None = None
    duration_s: float | None = None
    median_time_s: float | None = None
    chunk_s: float | None = None
    latency_ms_mean: float | None = None
    latency_ms_p95: float | None = None

    @property
    def memory_mb(self) -> float:
        return self.weight_bytes_f32 / 1e6

    def param_deviation(self) -> float:
        """Relative deviation of the parameter count from the reference model."""
        return self.param_count / REFERENCE_PARAMS - 1.0

    def as_dict(self) -> dict:
        d = asdict(self)
        d["memory_mb_f32"] = self.memory_mb
        d["reference_params"] = REFERENCE_PARAMS
        d["reference_memory_mb"] = REFERENCE_MEMORY_MB
        d["param_deviation"] = self.param_deviation()
        return d


def count_params(model: Module, dtype=None) -> BenchReport:
    """Exact element count; weight bytes at the active precision and at single precision."""
    n = model.num_params()
    itemsize = np.dtype(dtype or model.parameters()[0].dtype).itemsize
    cfg = getattr(model, "cfg", None)
    act = activation_estimate(cfg, 16000, itemsize) if isinstance(cfg, ModelConfig) else 0
    return BenchReport(n, n * itemsize, n * 4, act)


def activation_estimate(cfg: ModelConfig, n_samples: int, itemsize: int = 4, batch: int = 1) -> int:
    """Analytic peak live activation size for one inference pass.

    Counted at the attention step, the widest point: the T x T score matrix
    per head plus Q, K, V, the encoder output and the aligned visual stream.
    """
    t = cfg.latent_len(n_samples)
    elems = cfg.heads * t * t + 4 * cfg.enc_channels * t + cfg.visual_dim * t + n_samples
    return int(batch * elems * itemsize)


def bench_rtf(process: Callable[[np.ndarray, VisualStream], object], duration_s: float = 1.0, reps: int = 3,
              warmup: int = 1, rate: int = 16000, visual_dim: int = 32, fps: float = 25.0,
              chunk_s: float | None = None, seed: int = 0) -> dict:
    """Real-time factor = median wall time / audio duration; warm-up runs are not timed.

    With ``chunk_s`` the signal is also streamed in fixed chunks and per-chunk
    latency (mean, 95th percentile) is reported in milliseconds.
    """
    with thread_limit():
        return _bench(process, duration_s, reps, warmup, rate, visual_dim, fps, chunk_s, seed)


def _bench(process, duration_s, reps, warmup, rate, visual_dim, fps, chunk_s, seed) -> dict:
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * rate))
    audio = 0.1 * rng.standard_normal(n)
    visual = VisualStream("features", rng.standard_normal((max(1, int(duration_s * fps)), visual_dim)), fps)
    for _ in range(warmup):
        process(audio, visual)
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        process(audio, visual)
        times.append(time.perf_counter() - t0)
    med = float(np.median(times))
    out = {"rtf": med / duration_s, "duration_s": duration_s, "median_time_s": med}
    if chunk_s:
        cn = int(round(chunk_s * rate))
        nf = max(1, int(round(chunk_s * fps)))
        lat = []
        for s in range(0, n - cn + 1, cn):
            cv = VisualStream("features", visual.data[:nf], fps)
            t0 = time.perf_counter()
            process(audio[s:s + cn], cv)
            lat.append(1e3 * (time.perf_counter() - t0))
        if lat:
            out.update(chunk_s=chunk_s, latency_ms_mean=float(np.mean(lat)),
                       latency_ms_p95=float(np.percentile(lat, 95)))
    return out


def bench_model(model, duration_s: float = 1.0, reps: int = 3, warmup: int = 1, chunk_s: float | None = None,
                mask_mode: str = "soft") -> BenchReport:
    rep = count_params(model)
    rep.peak_activation_bytes = activation_estimate(model.cfg, int(round(duration_s * model.cfg.sample_rate)),
                                                    model.dtype.itemsize)
    timing = bench_rtf(lambda a, v: model.enhance(a, v, mask_mode), duration_s, reps, warmup,
                       model.cfg.sample_rate, model.cfg.visual_dim, model.cfg.visual_fps, chunk_s)
    for k, v in timing.items():
        setattr(rep, k, v)
    return rep


# -- cross-modal diagnostics -------------------------------------------------------

@dataclass
class DiagReport:
    corr: np.ndarray
    lags: np.ndarray
    lag_curve: np.ndarray
    peak_lag: int

    @property
    def diagonal_mean(self) -> float:
        return float(np.nanmean(np.diag(self.corr)))


def diag_crossmodal(audio: np.ndarray, visual: np.ndarray, max_lag: int = 10) -> DiagReport:
    """Frame-pair Pearson correlation over feature dims and its mean along each diagonal.

    ``corr[i, j]`` correlates audio frame i with visual frame j; lag ``l``
    averages ``corr[i, i + l]``, so a positive peak means the visual stream
    trails the audio. Frames with constant features give NaN entries.
    """
    a = np.asarray(audio, dtype=np.float64)
    v = np.asarray(visual, dtype=np.float64)
    if a.ndim != 2 or a.shape != v.shape:
        raise DimensionError(f"audio {a.shape} and visual {v.shape} streams must share (frames, dims)")
    ac = np.ascontiguousarray(a - a.mean(axis=1, keepdims=True))
    vc = np.ascontiguousarray(v - v.mean(axis=1, keepdims=True))
    cov = ac @ vc.T
    va = np.diag(ac @ ac.T)
    vv = np.diag(vc @ vc.T)
    denom = np.sqrt(np.outer(va, vv))
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(denom > 0, cov / denom, np.nan)
    corr = np.clip(corr, -1.0, 1.0)
    T = len(a)
    max_lag = min(max_lag, T - 1)
    lags = np.arange(-max_lag, max_lag + 1)
    curve = np.array([_nanmean(np.diagonal(corr, offset=int(l))) for l in lags])
    peak = int(lags[np.nanargmax(curve)]) if np.any(np.isfinite(curve)) else 0
    return DiagReport(corr, lags, curve, peak)


def _nanmean(x: np.ndarray) -> float:
    x = x[np.isfinite(x)]
    return float(x.mean()) if x.size else float("nan")


def write_diag(report: DiagReport, out_dir: str | Path, plot: bool = False) -> list[Path]:
    """Write ``corr.csv`` (i,j,corr) and ``lag.csv`` (lag,corr); optionally ``diag.png``."""
    out_dir = Path(out_dir)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["i", "j", "corr"])
    for (i, j), c in np.ndenumerate(report.corr):
        w.writerow([i, j, "" if np.isnan(c) else f"{c:.6g}"])
    lag_buf = io.StringIO()
    lw = csv.writer(lag_buf, lineterminator="\n")
    lw.writerow(["lag", "corr"])
    for l, c in zip(report.lags, report.lag_curve):
        lw.writerow([int(l), "" if np.isnan(c) else f"{c:.6g}"])
    paths = [out_dir / "corr.csv", out_dir / "lag.csv"]
    atomic_write(paths[0], lambda f: f.write(buf.getvalue().encode()))
    atomic_write(paths[1], lambda f: f.write(lag_buf.getvalue().encode()))
    if plot:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
        im = ax1.imshow(report.corr, origin="lower", cmap="RdBu_r", vmin=-1, vmax=1, aspect="auto")
        ax1.set_xlabel("visual frame")
        ax1.set_ylabel("audio frame")
        fig.colorbar(im, ax=ax1)
        ax2.plot(report.lags, report.lag_curve, marker="o")
        ax2.axvline(report.peak_lag, color="k", ls="--")
        ax2.set_xlabel("lag (frames)")
        ax2.set_ylabel("mean correlation")
        fig.tight_layout()
        png = out_dir / "diag.png"
        atomic_write(png, lambda f: fig.savefig(f, format="png", dpi=100))
        plt.close(fig)
        paths.append(png)
    return paths
