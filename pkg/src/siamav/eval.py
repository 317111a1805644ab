"""Retrieval and classification metrics, masking throughput and embedding export.

Ties are broken by the lowest index everywhere: a stable sort on descending
score keeps earlier columns (or rows) ahead of later ones with equal scores.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import SyntheticDataset, _atomic_write
from .embed import AUDIO, VISUAL
from .loss import LossConfig
from .mask import DEFAULT_RATIOS, check_ratios, expected_kept_fraction, plan_masks
from .model import ModelConfig, SiameseAV
from .tensor import ConfigError, ShapeError, backward, no_grad


class MetricError(ValueError):
    """The metric is undefined for the given input."""


@dataclass
class EvalConfig:
    split: str = "eval"
    ks: tuple[int, ...] = (1, 5, 10)
    batch_size: int = 64
    frames: int = 1
    bench_ratios: tuple[tuple[float, ...], ...] = ((0.0,), (0.25,), (0.5,), (0.75,), DEFAULT_RATIOS)
    bench_steps: int = 5
    bench_batch: int = 12

    def __post_init__(self):
        self.ks = tuple(int(k) for k in self.ks)
        self.bench_ratios = tuple(tuple(float(r) for r in rs) for rs in self.bench_ratios)
        if self.frames < 1:
            raise ConfigError("frames must be at least 1")


# -- retrieval ------------------------------------------------------------------


def similarity_matrix(fa: np.ndarray, fv: np.ndarray) -> np.ndarray:
    """Cosine similarity, rows = audio queries, columns = visual gallery."""
    fa = np.asarray(fa, dtype=np.float64)
    fv = np.asarray(fv, dtype=np.float64)
    na = np.linalg.norm(fa, axis=1, keepdims=True)
    nv = np.linalg.norm(fv, axis=1, keepdims=True)
    if np.any(na == 0) or np.any(nv == 0):
        raise MetricError("zero-norm embedding in retrieval set")
    return np.clip((fa / na) @ (fv / nv).T, -1.0, 1.0)


def match_ranks(S: np.ndarray) -> np.ndarray:
    """0-based rank of the true (diagonal) match in each row."""
    S = np.asarray(S)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ShapeError(f"retrieval needs a square similarity matrix, got {S.shape}")
    n = S.shape[0]
    diag = np.diag(S)[:, None]
    cols = np.arange(n)[None, :]
    ahead = (S > diag) | ((S == diag) & (cols < np.arange(n)[:, None]))
    return ahead.sum(axis=1)


def recall_at_k(S: np.ndarray, k: int) -> float:
    """Fraction of rows whose same-index column ranks within the top k."""
    S = np.asarray(S)
    if k < 1 or (S.ndim == 2 and k > S.shape[1]):
        raise ValueError(f"k must be in [1, {S.shape[-1]}], got {k}")
    return float(np.mean(match_ranks(S) < k))


def retrieval_report(S: np.ndarray, ks=(1, 5, 10)) -> dict:
    """Audio-to-visual on S and visual-to-audio on its transpose."""
    ks = [k for k in ks if k <= S.shape[1]]
    return {
        "a2v": {f"R@{k}": recall_at_k(S, k) for k in ks},
        "v2a": {f"R@{k}": recall_at_k(S.T, k) for k in ks},
        "n": int(S.shape[0]),
    }


def pooled_features(model: SiameseAV, dataset: SyntheticDataset, indices, batch_size: int = 64, frame: int = 0):
    fa, fv = [], []
    with no_grad():
        for s in range(0, len(indices), batch_size):
            audio, images, _ = dataset.batch(indices[s : s + batch_size], frame)
            a, v = model.features(audio, images)
            fa.append(a.data)
            fv.append(v.data)
    return np.concatenate(fa), np.concatenate(fv)


def evaluate_retrieval(model: SiameseAV, dataset: SyntheticDataset, split: str = "eval", ks=(1, 5, 10), batch_size: int = 64) -> dict:
    fa, fv = pooled_features(model, dataset, dataset.indices(split), batch_size)
    report = retrieval_report(similarity_matrix(fa, fv), ks)
    report["split"] = split
    return report


# -- classification -------------------------------------------------------------


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    rel = np.asarray(labels)[order] > 0
    npos = int(rel.sum())
    if npos == 0:
        raise MetricError("class has no positives")
    hits = np.cumsum(rel)
    ranks = np.flatnonzero(rel) + 1
    return math.fsum((hits[ranks - 1] / ranks).tolist()) / npos


def mean_average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Unweighted mean of per-class AP over classes with at least one positive."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ShapeError(f"scores {scores.shape} and labels {labels.shape} must be equal (N, K)")
    present = [c for c in range(labels.shape[1]) if np.any(labels[:, c] > 0)]
    if not present:
        raise MetricError("mAP is undefined: no class has a positive label")
    return math.fsum(average_precision(scores[:, c], labels[:, c]) for c in present) / len(present)


def top1_accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def classification_report(model, head, dataset: SyntheticDataset, task: str, split: str = "eval", frames: int = 1, batch_size: int = 64) -> dict:
    """A-only, V-only and A+V metrics on one split, averaging probabilities over frames."""
    from .train import aggregate_predictions, predict_proba

    idx = dataset.indices(split)
    audio, _, labels = dataset.batch(idx)
    out = {}
    for name, modality in (("A", "a"), ("V", "v"), ("A+V", "av")):
        probs = []
        for f in range(frames):
            _, images, _ = dataset.batch(idx, f)
            probs.append(
                predict_proba(
                    model, head,
                    audio if "a" in modality else None,
                    images if "v" in modality else None,
                    modality, task, batch_size,
                )
            )
        p = aggregate_predictions(probs)
        if task == "ce":
            out[name] = {"top1": top1_accuracy(p, np.argmax(labels, axis=1))}
        else:
            out[name] = {"mAP": mean_average_precision(p, labels)}
    out["split"] = split
    out["n"] = int(len(idx))
    return out


# -- throughput -----------------------------------------------------------------


def fingerprint(obj) -> str:
    canon = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


@dataclass
class ThroughputReport:
    ratios: tuple[float, ...]
    mean_ratio: float
    samples_per_sec: float
    wall_time: float
    steps: int
    total_tokens_per_sample: int
    expected_kept_per_sample: float
    measured_kept_per_sample: float
    audio_kept_per_sample: float
    fingerprint: str
    step_times: list = field(default_factory=list)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["ratios"] = list(self.ratios)
        return out


def bench_masking(
    model_cfg: ModelConfig,
    ratio_configs,
    n_steps: int = 5,
    batch_size: int = 12,
    seed: int = 0,
    loss_cfg: LossConfig | None = None,
) -> list[ThroughputReport]:
    """Forward and backward passes of the pretraining loss per ratio config.

    Every config sees the same model weights and the same random inputs.
    Throughput uses the fastest step after one warm-up step, which is the
    least noisy estimate on a shared host.
    """
    from .train import pretrain_loss

    loss_cfg = loss_cfg or LossConfig()
    model = SiameseAV(model_cfg, seed)
    ag, vg = model_cfg.audio_grid, model_cfg.visual_grid
    rng = np.random.default_rng([seed, 11])
    audio = rng.standard_normal((batch_size, *ag.input_shape)).astype(model.dtype)
    images = rng.random((batch_size, *vg.input_shape)).astype(model.dtype)
    reports = []
    for ratios in ratio_configs:
        ratios = check_ratios(ratios)
        times = []
        kept = audio_kept = 0
        for step in range(n_steps + 1):
            plan = plan_masks(batch_size, ag.tokens, vg.tokens, ratios, np.random.default_rng([seed, step, 12]))
            model.zero_grad()
            t0 = time.perf_counter()
            backward(pretrain_loss(model, audio, images, plan, loss_cfg).total)
            dt = time.perf_counter() - t0
            if step:
                times.append(dt)
                kept += plan.kept_tokens()
                audio_kept += int(plan[AUDIO].kept_counts().sum())
        total = ag.tokens + vg.tokens
        samples = batch_size * n_steps
        reports.append(
            ThroughputReport(
                ratios=ratios,
                mean_ratio=1.0 - expected_kept_fraction(ratios),
                samples_per_sec=batch_size / min(times),
                wall_time=math.fsum(times),
                steps=n_steps,
                total_tokens_per_sample=total,
                expected_kept_per_sample=expected_kept_fraction(ratios) * total,
                measured_kept_per_sample=kept / samples,
                audio_kept_per_sample=audio_kept / samples,
                fingerprint=fingerprint({"model": model_cfg.to_dict(), "ratios": list(ratios), "batch": batch_size, "seed": seed}),
                step_times=times,
            )
        )
    return reports


# -- export ---------------------------------------------------------------------


def embeddings_csv(model: SiameseAV, dataset: SyntheticDataset, split: str = "eval", batch_size: int = 64) -> bytes:
    idx = dataset.indices(split)
    fa, fv = pooled_features(model, dataset, idx, batch_size)
    d = fa.shape[1]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "modality", "labels"] + [f"e_{j}" for j in range(d)])
    for row, i in enumerate(idx):
        labels = ";".join(str(c) for c in dataset.instance(i).classes)
        for mod, feats in (("a", fa), ("v", fv)):
            w.writerow([int(i), mod, labels] + [repr(float(x)) for x in feats[row]])
    return buf.getvalue().encode()


def export_embeddings(model: SiameseAV, dataset: SyntheticDataset, path, split: str = "eval", batch_size: int = 64) -> int:
    """Write one CSV row per (instance, modality); returns the row count."""
    payload = embeddings_csv(model, dataset, split, batch_size)
    try:
        _atomic_write(Path(path), payload)
    except OSError as e:
        raise OSError(f"cannot write embeddings to {path}: {e}") from e
    return payload.count(b"\n") - 1
