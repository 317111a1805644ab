"""Command-line entry point: ``siamav {pretrain,finetune,eval,mel}``.

Every command prints its seed and config hash first and embeds both in the
files it writes.  Exit codes: 0 success, 1 runtime or I/O failure, 2 usage
or configuration error.  ``SIAMAV_LOG`` sets the log level (default INFO).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import secrets
import sys
import time
from pathlib import Path

import numpy as np

from .config import PROFILES, RunConfig, profile
from .data import FormatError, InputError, MelConfig, SyntheticDataset, _atomic_write, log_mel, read_wav, write_tensor
from .eval import bench_masking, classification_report, evaluate_retrieval, export_embeddings
from .mask import check_ratios
from .model import SiameseAV
from .tensor import ConfigError
from .train import (
    ClassifierHead,
    ConfigMismatchError,
    DivergenceError,
    NonFiniteGradientError,
    append_jsonl,
    check_labels,
    finetune_epoch,
    load_checkpoint,
    pretrain_epoch,
    read_header,
    save_checkpoint,
)

CHECKPOINT = "checkpoint.avsm"
LOG = "log.jsonl"
REPORT = "report.json"
EMBEDDINGS = "embeddings.csv"

log = logging.getLogger("siamav")


class UsageError(Exception):
    """Bad flag combination."""


def _write_json(path: Path, obj) -> None:
    _atomic_write(path, (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode())


def _dataset(cfg: RunConfig) -> SyntheticDataset:
    return SyntheticDataset(cfg.data, cfg.model.image_size, cfg.model.audio_size)


def _announce(seed: int, cfg: RunConfig) -> None:
    print(f"seed={seed} config_hash={cfg.hash()}", flush=True)


# -- runs (also used directly by tests and demos) ---------------------------------


def pretrain_run(cfg: RunConfig, seed: int, out: Path, epochs: int | None = None, resume: Path | None = None) -> dict:
    """Pretrain into ``out``; with ``resume`` continue from that checkpoint's next epoch."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    epochs = cfg.train.pretrain.epochs if epochs is None else epochs
    model = SiameseAV(cfg.model, seed)
    optim = cfg.train.optimizer(cfg.train.pretrain.lr)
    history, start = [], 0
    cfg_doc = cfg.to_dict()
    if resume is not None:
        header = load_checkpoint(resume, model, optim, expected_config=cfg_doc)
        if header["rng"]["seed"] != seed:
            raise ConfigMismatchError(f"checkpoint was trained with seed {header['rng']['seed']}, not {seed}")
        start, history = header["rng"]["next_epoch"], header["history"]
    ds = _dataset(cfg)
    ckpt = out / CHECKPOINT
    last_good = str(resume) if resume is not None else None
    for epoch in range(start, epochs):
        report = pretrain_epoch(
            model, ds, optim, cfg.loss, cfg.mask.ratios, cfg.train.pretrain, epoch, seed,
            cfg.train.clip_norm, last_good=last_good,
        )
        report.update(seed=seed, config_hash=cfg.hash(), stage="pretrain")
        append_jsonl(out / LOG, report)
        history.append({k: report[k] for k in ("epoch", "loss", "contrastive", "reconstruction")})
        save_checkpoint(ckpt, model, optim, epoch + 1, seed, cfg_doc, history=history)
        last_good = f"{ckpt} (epoch {epoch + 1})"
        log.info("epoch %d loss %.4f (%.1fs)", epoch, report["loss"], report["wall_time"])
    if start >= epochs and not ckpt.exists():
        save_checkpoint(ckpt, model, optim, start, seed, cfg_doc, history=history)
    final = {
        "stage": "pretrain",
        "seed": seed,
        "config_hash": cfg.hash(),
        "epochs": epochs,
        "retrieval": {s: evaluate_retrieval(model, ds, s, cfg.eval.ks, cfg.eval.batch_size) for s in ("train", "eval")},
    }
    _write_json(out / REPORT, final)
    _write_json(out / "config.json", cfg_doc)
    return final


def finetune_run(cfg: RunConfig, seed: int, out: Path, init: str | None, epochs: int | None = None) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ds = _dataset(cfg)
    check_labels(np.stack([ds.instance(i).labels for i in ds.indices("train")]), cfg.train.task)
    model = SiameseAV(cfg.model, seed)
    if init is not None:
        load_checkpoint(init, model)
    head = ClassifierHead(cfg.model.d, cfg.data.K, seed, model.dtype)
    optim = cfg.train.optimizer(cfg.train.finetune.lr)
    epochs = cfg.train.finetune.epochs if epochs is None else epochs
    history = []
    for epoch in range(epochs):
        report = finetune_epoch(model, head, ds, optim, cfg.train, epoch, seed)
        report.update(seed=seed, config_hash=cfg.hash(), stage="finetune")
        append_jsonl(out / LOG, report)
        history.append({"epoch": epoch, "loss": report["loss"]})
    save_checkpoint(out / CHECKPOINT, model, optim, epochs, seed, cfg.to_dict(), head=head, history=history, stage="finetune")
    final = {
        "stage": "finetune",
        "seed": seed,
        "config_hash": cfg.hash(),
        "init": init or "none",
        "task": cfg.train.task,
        "epochs": epochs,
        "metrics": classification_report(model, head, ds, cfg.train.task, cfg.eval.split, cfg.eval.frames, cfg.eval.batch_size),
    }
    _write_json(out / REPORT, final)
    _write_json(out / "config.json", cfg.to_dict())
    return final


def eval_run(ckpt: Path, mode: str, out: Path | None = None, split: str | None = None) -> dict:
    ckpt = Path(ckpt)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    header = read_header(ckpt)
    cfg = RunConfig.from_dict(header["config"])
    seed = header["rng"]["seed"]
    _announce(seed, cfg)
    out = Path(out) if out is not None else ckpt.parent
    out.mkdir(parents=True, exist_ok=True)
    split = split or cfg.eval.split
    model = SiameseAV(cfg.model, seed)
    head = None
    if mode == "classify":
        if header.get("head") is None:
            raise ConfigError("classify mode needs a finetuned checkpoint with a classifier head")
        head = ClassifierHead(cfg.model.d, cfg.data.K, seed, model.dtype)
    load_checkpoint(ckpt, model, head=head)
    ds = _dataset(cfg)
    result = {"mode": mode, "seed": seed, "config_hash": cfg.hash(), "checkpoint": str(ckpt)}
    if mode == "retrieval":
        r = evaluate_retrieval(model, ds, split, cfg.eval.ks, cfg.eval.batch_size)
        for name, key in (("V->A", "v2a"), ("A->V", "a2v")):
            print(f"{name} " + " ".join(f"{k}={r[key][k]:.4f}" for k in ("R@1", "R@5") if k in r[key]))
        result["retrieval"] = r
    elif mode == "classify":
        r = classification_report(model, head, ds, cfg.train.task, split, cfg.eval.frames, cfg.eval.batch_size)
        for name in ("A", "V", "A+V"):
            print(f"{name} " + " ".join(f"{k}={v:.4f}" for k, v in r[name].items()))
        result["classification"] = r
    elif mode == "bench":
        reports = bench_masking(cfg.model, cfg.eval.bench_ratios, cfg.eval.bench_steps, cfg.eval.bench_batch, seed, cfg.loss)
        for rep in reports:
            print(
                f"ratios={list(rep.ratios)} samples/sec={rep.samples_per_sec:.2f} "
                f"kept/sample={rep.measured_kept_per_sample:.1f} of {rep.total_tokens_per_sample}"
            )
        result["bench"] = [r.to_dict() for r in reports]
    elif mode == "export":
        rows = export_embeddings(model, ds, out / EMBEDDINGS, split, cfg.eval.batch_size)
        print(f"wrote {rows} rows to {out / EMBEDDINGS}")
        result["export"] = {"rows": rows, "path": str(out / EMBEDDINGS), "split": split}
    else:
        raise UsageError(f"unknown mode {mode!r}")
    _write_json(out / REPORT, result)
    return result


# -- argument handling ------------------------------------------------------------


def _ratios(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad ratio list {text!r}") from e
    try:
        return check_ratios(vals)
    except ConfigError as e:
        raise argparse.ArgumentTypeError(str(e)) from e


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="siamav", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="JSON run config overlaid on the profile")
        sp.add_argument("--profile", choices=PROFILES, default="tiny")
        sp.add_argument("--out", type=Path, required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="run seed (drawn and printed when omitted)")
        sp.add_argument("--epochs", type=_positive, help="override the configured epoch count")

    pre = sub.add_parser("pretrain", help="masked contrastive + reconstruction pretraining")
    common(pre)
    pre.add_argument("--mask-ratios", type=_ratios, help="comma-separated ratio set; one value = fixed ratio")
    pre.add_argument("--resume", type=Path, help="continue from a checkpoint written by the same config and seed")

    ft = sub.add_parser("finetune", help="mixed-modality supervised finetuning")
    common(ft)
    ft.add_argument("--init", required=True, help="pretrained checkpoint, or 'none'")
    ft.add_argument("--task", choices=("bce", "ce"), help="override the configured task")

    ev = sub.add_parser("eval", help="retrieval, classification, throughput or embedding export")
    ev.add_argument("--ckpt", type=Path, required=True)
    ev.add_argument("--mode", choices=("retrieval", "classify", "bench", "export"), required=True)
    ev.add_argument("--out", type=Path, help="output directory (default: next to the checkpoint)")
    ev.add_argument("--split", choices=("train", "eval"))

    mel = sub.add_parser("mel", help="log-mel spectrogram of a 16-bit mono WAV file")
    mel.add_argument("--wav", type=Path, required=True)
    mel.add_argument("--out", type=Path, required=True, help="tensor container to write")
    mel.add_argument("--no-pad", action="store_true", help="keep the raw frame count")
    return p


def _run_config(args) -> RunConfig:
    base = profile(args.profile)
    cfg = RunConfig.load(args.config, base) if args.config else base
    if getattr(args, "mask_ratios", None) is not None:
        cfg = RunConfig.from_dict({"mask": {"ratios": list(args.mask_ratios)}}, cfg)
    if getattr(args, "task", None) is not None:
        cfg = RunConfig.from_dict({"train": {"task": args.task}}, cfg)
    return cfg


def _seed(args) -> int:
    return args.seed if args.seed is not None else secrets.randbelow(2**31)


def dispatch(args) -> None:
    if args.command == "mel":
        wave = read_wav(args.wav)
        spec = log_mel(wave, MelConfig(), pad=not args.no_pad)
        write_tensor(args.out, {"log_mel": spec})
        print(f"{args.wav}: {spec.shape[0]} frames x {spec.shape[1]} mel bins -> {args.out}")
        return
    if args.command == "eval":
        eval_run(args.ckpt, args.mode, args.out, args.split)
        return
    cfg = _run_config(args)
    seed = _seed(args)
    _announce(seed, cfg)
    if args.command == "pretrain":
        if args.resume is not None and not args.resume.exists():
            raise FileNotFoundError(f"checkpoint not found: {args.resume}")
        rep = pretrain_run(cfg, seed, args.out, args.epochs, args.resume)
        for split, r in rep["retrieval"].items():
            print(f"{split}: A->V R@1={r['a2v']['R@1']:.4f} V->A R@1={r['v2a']['R@1']:.4f}")
    else:
        init = None if args.init == "none" else args.init
        if init is not None and not Path(init).exists():
            raise FileNotFoundError(f"checkpoint not found: {init}")
        rep = finetune_run(cfg, seed, args.out, init, args.epochs)
        for name in ("A", "V", "A+V"):
            print(f"{name} " + " ".join(f"{k}={v:.4f}" for k, v in rep["metrics"][name].items()))


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("SIAMAV_LOG", "INFO").upper(),
        format="%(asctime)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    start = time.perf_counter()
    try:
        dispatch(args)
    except (ConfigError, ConfigMismatchError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, FormatError, InputError, DivergenceError, NonFiniteGradientError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    log.info("done in %.1fs", time.perf_counter() - start)
    return 0


if __name__ == "__main__":
    sys.exit(main())
