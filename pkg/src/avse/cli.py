"""Command-line entry point: ``avse {synth,train,enhance,eval,mask-eval,bench,diag}``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dsp
from .config import PRECISIONS, ConfigError, RunConfig, preset
from .dsp import atomic_write
from .encoders import VisualFormatError, read_visual, write_vft
from .harness import (REFERENCE_MEMORY_MB, REFERENCE_PARAMS, bench_model, diag_crossmodal, worker_count,
                      write_diag)
from .kernel import DimensionError
from .metrics import evaluate_corpus, hit_fa, read_mask, write_mask
from .model import MASK_MODES, AVSEModel
from .separator import estimate_mask, oracle_ibm
from .training import (NOISE_KINDS, Checkpoint, CheckpointError, Corpus, SynthSpec, TrainingError, synth_batch,
                       train)

log = logging.getLogger("avse")

MANIFEST_FIELDS = ["utt", "split", "cond", "snr_db"]
EXIT_PARTIAL = 2


class CliError(Exception):
    pass


# -- config resolution ----------------------------------------------------------

def resolve_config(args) -> RunConfig:
    """Preset, then the ``--config`` file on top, then explicit flags."""
    model, tr = preset(args.preset)
    cfg = RunConfig(model, tr)
    if args.config:
        cfg = RunConfig.load(args.config, base=cfg)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.precision is not None:
        over["precision"] = args.precision
    if over:
        cfg = RunConfig(cfg.model, replace(cfg.train, **over))
    return cfg


def load_model(args, cfg: RunConfig) -> tuple[AVSEModel, RunConfig]:
    """From ``--checkpoint`` if given, else freshly initialised from (config, seed)."""
    if getattr(args, "checkpoint", None):
        ck = Checkpoint.load(args.checkpoint)
        precision = args.precision or ck.config.train.precision
        ck_cfg = RunConfig(ck.config.model, replace(ck.config.train, precision=precision))
        return ck.build_model(PRECISIONS[precision]), ck_cfg
    return AVSEModel(cfg.model, seed=cfg.train.seed, dtype=cfg.train.dtype), cfg


# -- corpus directories ----------------------------------------------------------

def read_manifest(root: Path) -> list[dict]:
    path = root / "manifest.csv"
    try:
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
    except OSError as exc:
        raise CliError(f"cannot read corpus manifest {path}: {exc}") from exc
    if rows and set(MANIFEST_FIELDS) - set(rows[0]):
        raise CliError(f"{path}: header must contain {MANIFEST_FIELDS}")
    return rows


def load_item(root: Path, row: dict, rate: int) -> dict:
    utt = row["utt"]
    return {"utt": utt, "cond": row["cond"], "snr_db": float(row["snr_db"]),
            "clean": dsp.read_wav(root / f"{utt}_clean.wav", rate).samples,
            "noisy": dsp.read_wav(root / f"{utt}_noisy.wav", rate).samples,
            "visual": read_visual(root / f"{utt}.vft")}


def load_split(root: Path, split: str, rate: int) -> Corpus:
    rows = [r for r in read_manifest(root) if r["split"] == split]
    if not rows:
        raise CliError(f"{root}: no utterances in split {split!r}")
    items = [load_item(root, r, rate) for r in rows]
    lengths = {len(it["clean"]) for it in items} | {it["visual"].n_frames for it in items}
    if len({len(it["clean"]) for it in items}) != 1 or len({it["visual"].n_frames for it in items}) != 1:
        raise CliError(f"{root}/{split}: utterances must share one length for batched training, got {sorted(lengths)}")
    return Corpus(np.stack([it["clean"] for it in items]), np.stack([it["noisy"] for it in items]),
                  np.stack([it["visual"].data for it in items]), None, [it["utt"] for it in items],
                  [it["cond"] for it in items], np.array([it["snr_db"] for it in items]))


# -- subcommands ---------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    noise_wav = dsp.read_wav(args.noise_wav).samples if args.noise_wav else None
    spec = SynthSpec(seed=cfg.train.seed, utt_s=args.utt_s, rate=cfg.model.sample_rate, fps=cfg.model.visual_fps,
                     noise=args.noise, snr_range=(args.snr_lo, args.snr_hi), visual_dim=cfg.model.visual_dim)
    out = Path(args.out_dir)
    n = args.n_train + args.n_test
    b = synth_batch(spec, n, 0, noise_wav)
    p = dsp.StftParams(cfg.model.stft_window, cfg.model.stft_hop)
    rows = []
    for i in range(n):
        utt = b["utt"][i]
        for kind in ("clean", "noisy", "noise"):
            dsp.write_wav(out / f"{utt}_{kind}.wav", b[kind][i], "float32", spec.rate)
        write_vft(out / f"{utt}.vft", b["visual"][i], spec.fps)
        write_mask(out / f"{utt}_ibm.msk", oracle_ibm(b["clean"][i], b["noise"][i], p))
        rows.append({"utt": utt, "split": "train" if i < args.n_train else "test", "cond": b["cond"][i],
                     "snr_db": f"{b['snr_db'][i]:.6f}"})
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    atomic_write(out / "manifest.csv", lambda f: f.write(buf.getvalue().encode()))
    print(f"wrote {n} utterances ({args.n_train} train, {args.n_test} test) to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if args.epochs is not None:
        cfg = RunConfig(cfg.model, replace(cfg.train, epochs=args.epochs))
    root = Path(args.corpus)
    train_set = load_split(root, "train", cfg.model.sample_rate)
    val_set = load_split(root, args.val_split, cfg.model.sample_rate)
    out = Path(args.out_dir)
    resume = None
    if args.resume:
        resume = Checkpoint.load(args.resume)
        cfg = RunConfig(cfg.model, replace(resume.config.train, epochs=cfg.train.epochs))
    text = cfg.dumps().encode()
    atomic_write(out / "config.json", lambda f: f.write(text))
    res = train(cfg, train_set, val_set, out, resume=resume,
                on_epoch=lambda r: print(f"epoch {r['epoch']:3d}  train {r['train_loss']:.4f}  "
                                         f"val {r['val_loss']:.4f}  val_si_sdr {r['val_sisdr']:.3f} dB  "
                                         f"lr {r['lr']:.3g}", flush=True))
    if res.curve:
        print(f"final val SI-SDR {res.curve[-1]['val_sisdr']:.4f} dB; checkpoints in {out}")
    return 0


def cmd_enhance(args) -> int:
    cfg = resolve_config(args)
    model, cfg = load_model(args, cfg)
    noisy = dsp.read_wav(args.noisy, cfg.model.sample_rate)
    visual = read_visual(args.visual)
    res = model.enhance(noisy.samples, visual, args.mask_mode)
    dsp.write_wav(args.output, res["output"], args.format, noisy.rate)
    if args.raw_out:
        dsp.write_wav(args.raw_out, res["s_raw"], args.format, noisy.rate)
    if args.mask_out:
        if res["mask"] is None:
            raise CliError("--mask-out needs --mask-mode soft or binary")
        write_mask(args.mask_out, res["mask"].binary)
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    model, cfg = load_model(args, cfg)
    root = Path(args.corpus)
    rows = [r for r in read_manifest(root) if args.split == "all" or r["split"] == args.split]
    if not rows:
        raise CliError(f"{root}: no utterances in split {args.split!r}")
    rate = cfg.model.sample_rate

    def run(row: dict) -> dict:
        try:
            item = load_item(root, row, rate)
            res = model.enhance(item["noisy"], item["visual"], args.mask_mode)
            item["enhanced"] = res["output"]
            mask = res["mask"]
            ref_path = root / f"{row['utt']}_ibm.msk"
            if ref_path.exists():
                em = mask or estimate_mask(res["s_raw"], item["noisy"], model.stft_params())
                item["est_mask"] = em.binary
                item["ref_mask"] = read_mask(ref_path)
            return item
        except (ValueError, OSError) as exc:
            return {"utt": row["utt"], "error": f"{type(exc).__name__}: {exc}"}

    # map() keeps manifest order whatever the worker count.
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        items = list(pool.map(run, rows))
    report = evaluate_corpus(items, args.pesq_cmd)
    report.write_csv(args.output)
    overall = report.aggregate()[-1] if report.rows else None
    if overall:
        print(f"{len(report.rows)} utterances: SI-SDR noisy {overall['si_sdr_noisy']:.4f} dB, "
              f"enhanced {overall['si_sdr_enh']:.4f} dB; STOI {overall['stoi_noisy']:.4f} -> "
              f"{overall['stoi_enh']:.4f}")
    for utt, msg in report.errors:
        print(f"error: {utt}: {msg}", file=sys.stderr)
    return EXIT_PARTIAL if report.errors else 0


def cmd_mask_eval(args) -> int:
    s = hit_fa(read_mask(args.estimate), read_mask(args.reference))
    print(f"HIT {s.hit:.6f}\nFA {s.fa:.6f}\nHIT-FA {s.hit_minus_fa:.6f}\nACC {s.accuracy:.6f}")
    return 0


def cmd_bench(args) -> int:
    cfg = resolve_config(args)
    model, cfg = load_model(args, cfg)
    rep = bench_model(model, args.duration, args.reps, args.warmup, args.chunk, args.mask_mode)
    dev_p = rep.param_count / REFERENCE_PARAMS - 1
    dev_m = rep.memory_mb / REFERENCE_MEMORY_MB - 1
    print(f"params          {rep.param_count}  (reference 5.90M, deviation {100 * dev_p:+.1f}%)")
    print(f"weights f32     {rep.memory_mb:.2f} MB  (reference {REFERENCE_MEMORY_MB} MB, "
          f"deviation {100 * dev_m:+.1f}%)")
    print(f"weights {cfg.train.precision}     {rep.weight_bytes / 1e6:.2f} MB")
    print(f"activations     {rep.peak_activation_bytes / 1e6:.2f} MB (analytic peak, {args.duration:g} s input)")
    print(f"rtf             {rep.rtf:.4f}  (median of {args.reps}, {args.duration:g} s audio)")
    if rep.latency_ms_mean is not None:
        print(f"chunk latency   mean {rep.latency_ms_mean:.2f} ms, p95 {rep.latency_ms_p95:.2f} ms "
              f"({args.chunk:g} s chunks)")
    if args.json:
        text = json.dumps(rep.as_dict(), indent=2).encode()
        atomic_write(args.json, lambda f: f.write(text))
    return 0


def cmd_diag(args) -> int:
    cfg = resolve_config(args)
    model, cfg = load_model(args, cfg)
    noisy = dsp.read_wav(args.noisy, cfg.model.sample_rate)
    a, v = model.encode_streams(noisy.samples, read_visual(args.visual))
    if a.shape[1] != v.shape[1]:
        raise CliError(f"audio dim {a.shape[1]} and visual dim {v.shape[1]} differ; correlation needs equal dims")
    if args.max_frames:
        a, v = a[:args.max_frames], v[:args.max_frames]
    rep = diag_crossmodal(a, v, args.max_lag)
    paths = write_diag(rep, args.out_dir, args.plot)
    print(f"frames {len(a)}, diagonal mean r {rep.diagonal_mean:.4f}, peak lag {rep.peak_lag:+d} frames")
    print("wrote " + ", ".join(str(p) for p in paths))
    return 0


# -- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--config", help="JSON config file (fields override the preset)")
    g.add_argument("--preset", default="tiny", choices=["paper", "paper-128", "tiny"])
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--precision", choices=sorted(PRECISIONS), default=None)
    g.add_argument("--mask-mode", choices=MASK_MODES, default="soft")
    g.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="avse", description="Audio-visual speech enhancement toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic audio-visual corpus")
    p.add_argument("out_dir")
    p.add_argument("--n-train", type=int, default=80)
    p.add_argument("--n-test", type=int, default=20)
    p.add_argument("--utt-s", type=float, default=1.2)
    p.add_argument("--noise", choices=NOISE_KINDS, default="white")
    p.add_argument("--noise-wav", help="noise recording for --noise wav")
    p.add_argument("--snr-lo", type=float, default=-10.0)
    p.add_argument("--snr-hi", type=float, default=10.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train on a corpus directory")
    p.add_argument("corpus")
    p.add_argument("-o", "--out-dir", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--val-split", default="test")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", parents=[common], help="enhance one noisy WAV")
    p.add_argument("noisy")
    p.add_argument("visual", help=".vft features or .vfr frames")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--mask-out")
    p.add_argument("--raw-out")
    p.add_argument("--format", choices=["float32", "pcm16"], default="float32")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("eval", parents=[common], help="evaluate a corpus split into a report CSV")
    p.add_argument("corpus")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test")
    p.add_argument("--pesq-cmd", help="external PESQ command with {ref} and {deg} placeholders")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mask-eval", parents=[common], help="HIT/FA of an estimated mask vs the ideal one")
    p.add_argument("estimate")
    p.add_argument("reference")
    p.set_defaults(func=cmd_mask_eval)

    p = sub.add_parser("bench", parents=[common], help="parameter count, memory and real-time factor")
    p.add_argument("--checkpoint")
    p.add_argument("--duration", type=float, default=1.0)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--chunk", type=float, default=None, help="also time streaming in chunks of this many seconds")
    p.add_argument("--json", help="write the report as JSON")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("diag", parents=[common], help="audio/visual feature correlation diagnostics")
    p.add_argument("noisy")
    p.add_argument("visual")
    p.add_argument("-o", "--out-dir", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--max-lag", type=int, default=10)
    p.add_argument("--max-frames", type=int, default=0, help="limit the matrix to the first N latent frames")
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_diag)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ConfigError, CheckpointError, TrainingError, DimensionError, VisualFormatError,
            ValueError, KeyError, OSError) as exc:
        print(f"avse {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
