"""Synthetic audio-visual corpus, optimiser, LR schedule, checkpoints and the training loop."""

from __future__ import annotations

import csv
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import dsp
from .config import ConfigError, ModelConfig, RunConfig, TrainConfig
from .dsp import atomic_write
from .kernel import Tensor, make_rng, no_grad
from .model import AVSEModel

log = logging.getLogger(__name__)

NOISE_KINDS = ("white", "babble", "wav")


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# -- synthetic data ---------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Harmonic speech surrogate with a syllabic envelope, mixed with noise at a target SNR.

    Visual frame k carries ``[e(t_k), de/dt(t_k) / 20, harmonic weights...]``
    sampled at ``fps``; remaining dimensions are zero.
    """

    seed: int = 0
    utt_s: float = 1.2
    rate: int = 16000
    fps: float = 25.0
    noise: str = "white"
    snr_range: tuple[float, float] = (-10.0, 10.0)
    visual_dim: int = 32
    harmonics: tuple[int, int] = (3, 5)
    amplitude: float = 0.3

    def __post_init__(self):
        lo, hi = self.snr_range
        if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
            raise ConfigError(f"invalid SNR range {self.snr_range}")
        if self.noise not in NOISE_KINDS:
            raise ConfigError(f"noise must be one of {NOISE_KINDS}, got {self.noise!r}")
        if self.visual_dim < 2 + self.harmonics[1]:
            raise ConfigError(f"visual_dim {self.visual_dim} too small for the feature layout")
        if not 1 <= self.harmonics[0] <= self.harmonics[1]:
            raise ConfigError(f"invalid harmonic count range {self.harmonics}")

    @property
    def n_samples(self) -> int:
        return int(round(self.utt_s * self.rate))

    @property
    def n_frames(self) -> int:
        return int(np.floor(self.utt_s * self.fps + 1e-9))


def envelope(rng: np.random.Generator, n: int, rate: int) -> np.ndarray:
    """Syllable-like envelope in [0, 1]: Hann bumps every 0.15-0.35 s."""
    e = np.zeros(n)
    t = rng.uniform(0.0, 0.15)
    while t < n / rate:
        dur = rng.uniform(0.1, 0.25)
        amp = rng.uniform(0.4, 1.0)
        start = int(t * rate)
        m = int(dur * rate)
        bump = amp * np.hanning(m + 2)[1:-1]
        stop = min(n, start + m)
        e[start:stop] = np.maximum(e[start:stop], bump[:stop - start])
        t += rng.uniform(0.15, 0.35)
    return e


def speech_surrogate(rng: np.random.Generator, n: int, rate: int, harmonics=(3, 5), amplitude: float = 0.3):
    """Returns (signal, envelope, harmonic weights)."""
    e = envelope(rng, n, rate)
    f0 = rng.uniform(100.0, 220.0) * (1.0 + 0.05 * np.sin(2 * np.pi * rng.uniform(0.5, 3.0) * np.arange(n) / rate
                                                         + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(f0) / rate
    k_count = int(rng.integers(harmonics[0], harmonics[1] + 1))
    weights = rng.uniform(0.3, 1.0, size=k_count) / np.sqrt(np.arange(1, k_count + 1))
    carrier = np.zeros(n)
    for k in range(1, k_count + 1):
        carrier += weights[k - 1] * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    carrier /= np.max(np.abs(carrier)) + 1e-12
    return amplitude * e * carrier, e, weights


def visual_from_envelope(e: np.ndarray, weights: np.ndarray, spec: SynthSpec) -> np.ndarray:
    idx = np.minimum(np.round(np.arange(spec.n_frames) * spec.rate / spec.fps).astype(int), len(e) - 1)
    de = np.gradient(e) * spec.rate / 20.0
    feats = np.zeros((spec.n_frames, spec.visual_dim))
    feats[:, 0] = e[idx]
    feats[:, 1] = de[idx]
    feats[:, 2:2 + len(weights)] = weights
    return feats


def mix_at_snr(speech: np.ndarray, noise: np.ndarray, snr_db: float) -> tuple[np.ndarray, np.ndarray]:
    """Scale ``noise`` so that 10 log10(|s|^2 / |n|^2) == snr_db; returns (noisy, scaled noise)."""
    ps = speech @ speech
    pn = noise @ noise
    if pn == 0:
        raise ConfigError("noise signal is all zeros")
    scaled = noise * np.sqrt(ps / (pn * 10.0 ** (snr_db / 10.0)))
    return speech + scaled, scaled


def _noise(rng: np.random.Generator, spec: SynthSpec, n: int, noise_wav: np.ndarray | None) -> np.ndarray:
    if spec.noise == "white":
        return rng.standard_normal(n)
    if spec.noise == "babble":
        return sum(speech_surrogate(rng, n, spec.rate, spec.harmonics)[0] for _ in range(4))
    if noise_wav is None or len(noise_wav) == 0:
        raise ConfigError("noise='wav' needs a noise recording")
    start = int(rng.integers(0, len(noise_wav)))
    reps = int(np.ceil((start + n) / len(noise_wav)))
    return np.tile(noise_wav, reps)[start:start + n]


def synth_item(spec: SynthSpec, index: int, noise_wav: np.ndarray | None = None) -> dict:
    rng = make_rng(spec.seed, 7, index)
    n = spec.n_samples
    clean, e, weights = speech_surrogate(rng, n, spec.rate, spec.harmonics, spec.amplitude)
    snr = float(rng.uniform(*spec.snr_range))
    noisy, noise = mix_at_snr(clean, _noise(rng, spec, n, noise_wav), snr)
    return {"clean": clean, "noise": noise, "noisy": noisy, "visual": visual_from_envelope(e, weights, spec),
            "envelope": e, "snr_db": snr, "cond": spec.noise, "utt": f"utt{index:05d}"}


def synth_batch(spec: SynthSpec, n: int, start: int = 0, noise_wav: np.ndarray | None = None) -> dict:
    """``n`` items stacked into arrays; item i depends only on (seed, start + i)."""
    items = [synth_item(spec, start + i, noise_wav) for i in range(n)]
    out = {k: np.stack([it[k] for it in items]) for k in ("clean", "noise", "noisy", "visual", "envelope")}
    out["snr_db"] = np.array([it["snr_db"] for it in items])
    out["cond"] = [it["cond"] for it in items]
    out["utt"] = [it["utt"] for it in items]
    return out


# -- optimisation -------------------------------------------------------------

class RMSprop:
    """v <- a v + (1 - a) g^2;  p <- p - lr g / (sqrt(v) + eps)."""

    def __init__(self, params: dict[str, Tensor], lr: float, alpha: float = 0.99, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.alpha = alpha
        self.eps = eps
        self.state = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.steps = 0

    def step(self) -> None:
        self.steps += 1
        for k, t in self.params.items():
            if t.grad is None:
                continue
            if not np.all(np.isfinite(t.grad)):
                raise TrainingError(f"non-finite gradient for {k} at optimiser step {self.steps}")
            rmsprop_step(t.data, t.grad, self.state[k], self.lr, self.alpha, self.eps)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None


def rmsprop_step(p: np.ndarray, g: np.ndarray, v: np.ndarray, lr: float, alpha: float = 0.99,
                 eps: float = 1e-8) -> None:
    """In-place update of parameter ``p`` and square-average ``v``."""
    v *= alpha
    v += (1.0 - alpha) * g * g
    p -= lr * g / (np.sqrt(v) + eps)


@dataclass
class PlateauScheduler:
    """Multiply the LR by ``factor`` after ``patience`` consecutive epochs without improvement."""

    lr: float
    factor: float = 0.8
    patience: int = 5
    threshold: float = 1e-4
    best: float = np.inf
    num_bad: int = 0

    def step(self, val_loss: float) -> float:
        if not np.isfinite(val_loss):
            raise TrainingError(f"validation loss is not finite: {val_loss}")
        improved = not np.isfinite(self.best) or val_loss < self.best - self.threshold * abs(self.best)
        if improved:
            self.best = val_loss
            self.num_bad = 0
        else:
            self.num_bad += 1
            if self.num_bad >= self.patience:
                self.lr *= self.factor
                self.num_bad = 0
        return self.lr


# -- checkpoints ----------------------------------------------------------------

CKPT_MAGIC = b"AVSE"
CKPT_VERSION = 1


def write_arrays(path, fingerprint: int, arrays: dict[str, np.ndarray]) -> None:
    """Magic, u32 version, u64 fingerprint, u32 count, then per array:
    u32 name length, name, u32 rank, u32 extents, f64 values (all little-endian)."""
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<IQI", CKPT_VERSION, fingerprint, len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        buf.write(arr.tobytes())
    atomic_write(path, lambda f: f.write(buf.getvalue()))


def read_arrays(path) -> tuple[int, dict[str, np.ndarray]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    try:
        version, fp, count = struct.unpack_from("<IQI", blob, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        off = 4 + 16
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + nlen].decode()
            off += nlen
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            if off + 8 * n > len(blob):
                raise CheckpointError(f"{path}: truncated array {name!r}")
            arrays[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).copy()
            off += 8 * n
        if off != len(blob):
            raise CheckpointError(f"{path}: {len(blob) - off} unexpected trailing bytes")
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from exc
    return fp, arrays


@dataclass
class Checkpoint:
    config: RunConfig
    weights: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    scheduler: dict[str, float] = field(default_factory=dict)
    epoch: int = 0
    best_val_loss: float = float("inf")

    def save(self, path) -> int:
        """Write the checkpoint; returns the number of serialized model weight elements."""
        arrays: dict[str, np.ndarray] = {f"model/{k}": v for k, v in self.weights.items()}
        arrays.update({f"opt/{k}": v for k, v in self.optimizer.items()})
        arrays.update({f"sched/{k}": np.array(v) for k, v in self.scheduler.items()})
        arrays["meta/epoch"] = np.array(self.epoch)
        arrays["meta/best_val_loss"] = np.array(self.best_val_loss)
        arrays["meta/config_json"] = np.frombuffer(self.config.dumps().encode(), dtype=np.uint8)
        write_arrays(path, self.config.model.fingerprint(), arrays)
        return sum(v.size for v in self.weights.values())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        fp, arrays = read_arrays(path)
        try:
            cfg_json = arrays.pop("meta/config_json").astype(np.uint8).tobytes().decode()
            config = RunConfig.from_dict(json.loads(cfg_json))
            epoch = int(arrays.pop("meta/epoch"))
            best = float(arrays.pop("meta/best_val_loss"))
        except KeyError as exc:
            raise CheckpointError(f"{path}: missing {exc}") from exc
        if config.model.fingerprint() != fp:
            raise CheckpointError(f"{path}: config fingerprint mismatch")
        pick = lambda prefix: {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        sched = {k: float(v) for k, v in pick("sched/").items()}
        return cls(config, pick("model/"), pick("opt/"), sched, epoch, best)

    def build_model(self, dtype=None) -> AVSEModel:
        dtype = dtype or self.config.train.dtype
        model = AVSEModel(self.config.model, seed=self.config.train.seed, dtype=dtype)
        model.load_state_dict(self.weights)
        return model


# -- training loop -----------------------------------------------------------

@dataclass
class Corpus:
    clean: np.ndarray
    noisy: np.ndarray
    visual: np.ndarray
    noise: np.ndarray | None = None
    utt: list[str] = field(default_factory=list)
    cond: list[str] = field(default_factory=list)
    snr_db: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.clean)

    @classmethod
    def from_batch(cls, b: dict) -> "Corpus":
        return cls(b["clean"], b["noisy"], b["visual"], b["noise"], list(b["utt"]), list(b["cond"]), b["snr_db"])

    def subset(self, idx) -> "Corpus":
        idx = list(idx)
        return Corpus(self.clean[idx], self.noisy[idx], self.visual[idx],
                      None if self.noise is None else self.noise[idx],
                      [self.utt[i] for i in idx] if self.utt else [],
                      [self.cond[i] for i in idx] if self.cond else [],
                      None if self.snr_db is None else self.snr_db[idx])


def crop_plan(n_samples: int, n_frames: int, seg_s: float, rate: int, fps: float) -> tuple[int, int, int]:
    """(samples per visual frame, segment samples, segment frames); crops start on visual frame boundaries."""
    spf = rate / fps
    if spf != int(spf):
        raise ConfigError(f"rate {rate} is not a whole multiple of fps {fps}")
    spf = int(spf)
    seg_frames = int(round(seg_s * fps))
    seg_samples = seg_frames * spf
    if seg_samples > n_samples or seg_frames > n_frames:
        raise ConfigError(f"segment of {seg_s} s does not fit utterances of {n_samples} samples / {n_frames} frames")
    return spf, seg_samples, seg_frames


def random_crops(corpus: Corpus, idx: np.ndarray, rng: np.random.Generator, seg_s: float, rate: int, fps: float):
    """Aligned audio/visual crops: visual frames [k0, k0 + F) cover samples [k0 * spf, (k0 + F) * spf)."""
    n_samples, n_frames = corpus.clean.shape[1], corpus.visual.shape[1]
    spf, seg_samples, seg_frames = crop_plan(n_samples, n_frames, seg_s, rate, fps)
    max_k0 = min(n_frames - seg_frames, (n_samples - seg_samples) // spf)
    k0 = rng.integers(0, max_k0 + 1, size=len(idx))
    clean = np.stack([corpus.clean[i, k * spf:k * spf + seg_samples] for i, k in zip(idx, k0)])
    noisy = np.stack([corpus.noisy[i, k * spf:k * spf + seg_samples] for i, k in zip(idx, k0)])
    visual = np.stack([corpus.visual[i, k:k + seg_frames] for i, k in zip(idx, k0)])
    assert all(k * spf == round(k / fps * rate) for k in k0)
    return clean, noisy, visual, k0


def validate(model: AVSEModel, corpus: Corpus, batch: int, clip_db: float) -> tuple[float, float, np.ndarray]:
    """(mean clipped loss, mean SI-SDR of the raw estimate, raw estimates) over full utterances."""
    outs = []
    losses = []
    with no_grad():
        for s in range(0, len(corpus), batch):
            sl = slice(s, s + batch)
            out = model(corpus.noisy[sl].astype(model.dtype), corpus.visual[sl].astype(model.dtype))
            losses.append(float(dsp.si_sdr_loss(corpus.clean[sl], out, clip_db).data) * out.shape[0])
            outs.append(out.data.astype(np.float64))
    est = np.concatenate(outs)
    sdr = [dsp.cap_db(dsp.si_sdr(c, e)) for c, e in zip(corpus.clean, est)]
    return sum(losses) / len(corpus), float(np.mean(sdr)), est


@dataclass
class TrainResult:
    curve: list[dict]
    checkpoint: Checkpoint
    model: AVSEModel


def train(config: RunConfig, train_set: Corpus, val_set: Corpus, out_dir: str | Path | None = None,
          resume: Checkpoint | None = None, on_epoch: Callable[[dict], None] | None = None,
          stop_after: int | None = None) -> TrainResult:
    """Random-crop training on SI-SDR loss with RMSprop and plateau LR decay.

    Randomness is keyed by (seed, epoch, step), so resuming from a checkpoint
    replays exactly the epochs an uninterrupted run would have produced.
    """
    tc: TrainConfig = config.train
    mc: ModelConfig = config.model
    if resume is not None:
        if resume.config.model != mc:
            raise CheckpointError("checkpoint model config differs from the requested config")
        model = resume.build_model(tc.dtype)
    else:
        model = AVSEModel(mc, seed=tc.seed, dtype=tc.dtype)
    params = dict(model.named_parameters())
    opt = RMSprop(params, tc.lr, tc.rms_alpha, tc.rms_eps)
    sched = PlateauScheduler(tc.lr, tc.plateau_factor, tc.plateau_patience, tc.plateau_threshold)
    start_epoch, best_val = 1, float("inf")
    if resume is not None:
        for k, v in resume.optimizer.items():
            opt.state[k] = v.astype(tc.dtype)
        sched.lr = resume.scheduler["lr"]
        sched.best = resume.scheduler["best"]
        sched.num_bad = int(resume.scheduler["num_bad"])
        opt.steps = int(resume.scheduler.get("steps", 0))
        start_epoch = resume.epoch + 1
        best_val = resume.best_val_loss
    out_dir = Path(out_dir) if out_dir is not None else None
    curve: list[dict] = []
    ckpt = resume
    last_epoch = tc.epochs if stop_after is None else min(tc.epochs, stop_after)
    for epoch in range(start_epoch, last_epoch + 1):
        opt.lr = sched.lr
        rng = make_rng(tc.seed, 11, epoch)
        order = rng.permutation(len(train_set))
        losses = []
        for step, s in enumerate(range(0, len(order), tc.batch)):
            idx = order[s:s + tc.batch]
            clean, noisy, visual, _ = random_crops(train_set, idx, rng, tc.segment_s, mc.sample_rate, mc.visual_fps)
            drop_rng = make_rng(tc.seed, 13, epoch, step)
            out = model(noisy.astype(tc.dtype), visual.astype(tc.dtype), training=True, rng=drop_rng)
            loss = dsp.si_sdr_loss(clean, out, tc.loss_clip_db)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step} "
                                    f"(batch seed key: seed={tc.seed}, epoch={epoch}, step={step})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(value)
        val_loss, val_sisdr, _ = validate(model, val_set, tc.val_batch, tc.loss_clip_db)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss,
               "val_sisdr": val_sisdr, "lr": opt.lr}
        sched.step(val_loss)
        curve.append(row)
        log.info("epoch %d train %.4f val %.4f val_sisdr %.3f lr %.3g", epoch, row["train_loss"], val_loss,
                 val_sisdr, row["lr"])
        improved = val_loss < best_val
        best_val = min(best_val, val_loss)
        ckpt = Checkpoint(config, {k: t.data.astype(np.float64) for k, t in params.items()},
                          {k: v.astype(np.float64) for k, v in opt.state.items()},
                          {"lr": sched.lr, "best": sched.best, "num_bad": sched.num_bad, "steps": opt.steps},
                          epoch, best_val)
        if out_dir is not None:
            saved = ckpt.save(out_dir / "last.ckpt")
            if saved != model.num_params():
                raise CheckpointError(f"serialized {saved} weights but the model has {model.num_params()}")
            if improved:
                ckpt.save(out_dir / "best.ckpt")
            append_curve(out_dir / "loss_curve.csv", row, fresh=(epoch == 1))
        if on_epoch is not None:
            on_epoch(row)
    return TrainResult(curve, ckpt, model)


CURVE_FIELDS = ["epoch", "train_loss", "val_loss", "val_sisdr", "lr"]


def append_curve(path: Path, row: dict, fresh: bool) -> None:
    mode = "w" if fresh or not path.exists() else "a"
    with open(path, mode, newline="") as f:
        w = csv.DictWriter(f, fieldnames=CURVE_FIELDS)
        if mode == "w":
            w.writeheader()
        w.writerow({k: (row[k] if k == "epoch" else repr(float(row[k]))) for k in CURVE_FIELDS})


def split_corpus(corpus: Corpus, n_val: int) -> tuple[Corpus, Corpus]:
    n = len(corpus)
    return corpus.subset(range(n - n_val)), corpus.subset(range(n - n_val, n))


def make_corpus(spec: SynthSpec, n: int, noise_wav: np.ndarray | None = None) -> Corpus:
    return Corpus.from_batch(synth_batch(spec, n, 0, noise_wav))


def synth_splits(spec: SynthSpec, n_train: int, n_val: int, noise_wav=None) -> tuple[Corpus, Corpus]:
    return split_corpus(make_corpus(spec, n_train + n_val, noise_wav), n_val)


def noisy_baseline(corpus: Corpus) -> float:
    return float(np.mean([dsp.cap_db(dsp.si_sdr(c, y)) for c, y in zip(corpus.clean, corpus.noisy)]))
