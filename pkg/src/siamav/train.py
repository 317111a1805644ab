"""Pretraining and finetuning loops, optimizer, schedules and checkpoints."""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .data import SyntheticDataset, _atomic_write, read_tensor, write_tensor
from .embed import AUDIO, VISUAL
from .loss import (
    LossConfig,
    bce_with_logits,
    contrastive_loss,
    cross_entropy,
    reconstruction_loss,
    total_pretrain_loss,
)
from .mask import MaskPlan, plan_masks
from .model import EncoderOutput, Linear, Module, SiameseAV
from .tensor import ConfigError, Tensor, backward, concat, gelu, global_norm, no_grad

MODALITY_DRAWS = ("a", "v", "av")
TASKS = ("bce", "ce")


class NonFiniteGradientError(FloatingPointError):
    """A parameter gradient contains NaN or inf."""


class DivergenceError(FloatingPointError):
    """The training loss stopped being finite."""


class ConfigMismatchError(ValueError):
    """A checkpoint was written for a different configuration."""


# -- optimizer -----------------------------------------------------------------


@dataclass
class OptimState:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.95, 0.999)
    weight_decay: float = 5e-7
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, Tensor],
    state: OptimState,
    lr: float | None = None,
    lr_scale: dict[str, float] | None = None,
) -> None:
    """One bias-corrected Adam update with decoupled weight decay.

    Parameters without a gradient are left alone.  A non-finite gradient
    aborts the whole step before anything is modified.
    """
    lr = state.lr if lr is None else lr
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(f"non-finite gradient in {name}")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        plr = lr * (lr_scale.get(name, 1.0) if lr_scale else 1.0)
        if state.weight_decay:
            p.data *= 1 - plr * state.weight_decay
        p.data -= (plr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params.values() if p.grad is not None]
    norm = global_norm(grads)
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)
    return norm


# -- schedules and sampling ---------------------------------------------------------


@dataclass
class Schedule:
    base_lr: float = 1e-4
    decay_start_epoch: int = 10
    decay_rate: float = 0.5
    decay_step: int = 5
    head_lr_multiplier: float = 1.0

    def lr(self, epoch: int) -> float:
        """Step decay: one factor of ``decay_rate`` at ``decay_start_epoch`` and
        another every ``decay_step`` epochs after it."""
        if epoch < self.decay_start_epoch:
            return self.base_lr
        k = (epoch - self.decay_start_epoch) // self.decay_step + 1
        return self.base_lr * self.decay_rate ** max(0, k)


@dataclass
class ModalitySampler:
    p_av: float = 0.5
    p_a: float = 0.25
    p_v: float = 0.25

    def __post_init__(self):
        probs = (self.p_a, self.p_v, self.p_av)
        if min(probs) < 0 or not math.isclose(sum(probs), 1.0, abs_tol=1e-12):
            raise ConfigError(f"modality probabilities must be nonnegative and sum to 1: {probs}")

    def draw(self, rng: np.random.Generator) -> str:
        u = rng.random()
        if u < self.p_a:
            return "a"
        if u < self.p_a + self.p_v:
            return "v"
        return "av"


class ClassifierHead(Module):
    """MLP over the concatenated [audio; visual] pooled features."""

    def __init__(self, d: int, K: int, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng([seed, 7])
        self.d = d
        self.fc1 = Linear(2 * d, d, rng, dtype)
        self.fc2 = Linear(d, K, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


# -- configuration ---------------------------------------------------------------


@dataclass
class PhaseConfig:
    batch_size: int = 48
    epochs: int = 20
    lr: float = 1e-4
    decay_start_epoch: int = 10
    decay_rate: float = 0.5
    decay_step: int = 5
    head_lr_multiplier: float = 1.0

    def schedule(self) -> Schedule:
        return Schedule(self.lr, self.decay_start_epoch, self.decay_rate, self.decay_step, self.head_lr_multiplier)


@dataclass
class TrainConfig:
    pretrain: PhaseConfig = field(default_factory=PhaseConfig)
    finetune: PhaseConfig = field(
        default_factory=lambda: PhaseConfig(
            batch_size=8, epochs=15, lr=1e-4, decay_start_epoch=2, decay_rate=0.75,
            decay_step=1, head_lr_multiplier=100.0,
        )
    )
    betas: tuple[float, float] = (0.95, 0.999)
    weight_decay: float = 5e-7
    eps: float = 1e-8
    clip_norm: float = 1.0
    task: str = "bce"
    p_av: float = 0.5
    p_a: float = 0.25
    p_v: float = 0.25

    def __post_init__(self):
        if isinstance(self.pretrain, dict):
            self.pretrain = PhaseConfig(**self.pretrain)
        if isinstance(self.finetune, dict):
            self.finetune = PhaseConfig(**self.finetune)
        self.betas = tuple(self.betas)
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        self.sampler()

    def sampler(self) -> ModalitySampler:
        return ModalitySampler(self.p_av, self.p_a, self.p_v)

    def optimizer(self, lr: float) -> OptimState:
        return OptimState(lr, self.betas, self.weight_decay, self.eps)


# -- pretraining -------------------------------------------------------------------


@dataclass
class PretrainParts:
    total: Tensor
    contrastive: Tensor | None
    reconstruction: Tensor | None
    audio: EncoderOutput
    visual: EncoderOutput


def pretrain_loss(
    model: SiameseAV,
    audio: np.ndarray,
    images: np.ndarray,
    plan: MaskPlan,
    loss_cfg: LossConfig,
    fused_inputs: tuple[EncoderOutput, EncoderOutput] | None = None,
) -> PretrainParts:
    """Contrastive loss on pooled encoder features plus reconstruction through
    the fusion blocks and decoder.

    ``fused_inputs`` replaces the encoder outputs fed to the fusion stage;
    gradient checks use it to hold that (detached) path fixed.
    """
    ea = model.encode_masked(model.embed(audio, AUDIO), plan)
    ev = model.encode_masked(model.embed(images, VISUAL), plan)
    lc = lrec = None
    if loss_cfg.scale_contrastive:
        lc = contrastive_loss(ea.pooled, ev.pooled, loss_cfg.tau, loss_cfg.symmetric)
    if loss_cfg.scale_reconstruction:
        fa, fv = fused_inputs or (ea, ev)
        image_rec, audio_rec = model.decode(model.fuse(fa, fv), plan)
        lrec = reconstruction_loss(
            image_rec, images, audio_rec, audio, plan, loss_cfg.recon_mode, model.cfg.patch
        )
    total = total_pretrain_loss(lc, lrec, loss_cfg.scale_contrastive, loss_cfg.scale_reconstruction)
    return PretrainParts(total, lc, lrec, ea, ev)


def batches(indices: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled full batches; the remainder is dropped."""
    order = rng.permutation(indices)
    n = len(order) // batch_size
    return [order[i * batch_size : (i + 1) * batch_size] for i in range(n)]


def pretrain_epoch(
    model: SiameseAV,
    dataset: SyntheticDataset,
    optim: OptimState,
    loss_cfg: LossConfig,
    ratios,
    phase: PhaseConfig,
    epoch: int,
    seed: int,
    clip_norm: float = 1.0,
    max_steps: int | None = None,
    last_good: str | None = None,
) -> dict:
    """One pass over the train split.  Batch order and masks derive from
    (seed, epoch, step) only, so an epoch can be replayed after a restart."""
    loss_cfg.check_pretraining()
    if phase.batch_size % len(ratios) and len(ratios) > 1:
        raise ConfigError(
            f"batch size {phase.batch_size} is not divisible by the {len(ratios)} masking ratios"
        )
    lr = phase.schedule().lr(epoch)
    params = model.parameters()
    start = time.perf_counter()
    sums = {"loss": 0.0, "contrastive": 0.0, "reconstruction": 0.0}
    kept = total = 0
    steps = 0
    ag, vg = model.cfg.audio_grid, model.cfg.visual_grid
    for step, idx in enumerate(batches(dataset.indices("train"), phase.batch_size, np.random.default_rng([seed, epoch, 0]))):
        if max_steps is not None and step >= max_steps:
            break
        audio, images, _ = dataset.batch(idx)
        plan = plan_masks(len(idx), ag.tokens, vg.tokens, ratios, np.random.default_rng([seed, epoch, step, 1]))
        model.zero_grad()
        parts = pretrain_loss(model, audio, images, plan, loss_cfg)
        value = parts.total.item()
        if not math.isfinite(value):
            where = f"; last good checkpoint: {last_good}" if last_good else ""
            raise DivergenceError(f"loss became {value} at epoch {epoch} step {step}{where}")
        backward(parts.total)
        clip_gradients(params, clip_norm)
        adam_step(params, optim, lr)
        sums["loss"] += value
        sums["contrastive"] += parts.contrastive.item() if parts.contrastive is not None else 0.0
        sums["reconstruction"] += parts.reconstruction.item() if parts.reconstruction is not None else 0.0
        kept += plan.kept_tokens()
        total += plan.total_tokens()
        steps += 1
    wall = time.perf_counter() - start
    report = {k: v / max(steps, 1) for k, v in sums.items()}
    report.update(
        epoch=epoch,
        steps=steps,
        lr=lr,
        tokens_kept=kept,
        tokens_total=total,
        kept_fraction=kept / total if total else 0.0,
        wall_time=wall,
    )
    return report


# -- finetuning ---------------------------------------------------------------------


def check_labels(labels: np.ndarray, task: str) -> None:
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
    if task == "ce" and not np.all(np.asarray(labels).sum(axis=1) == 1):
        raise ConfigError("task 'ce' needs exactly one label per instance; the data is multi-label")


def head_input(model: SiameseAV, audio, images, modality: str) -> Tensor:
    """[F_a; F_v] from unmasked inputs, zero-filling the absent modality."""
    n = len(audio) if audio is not None else len(images)
    fa, fv = model.features(
        audio if modality in ("a", "av") else None, images if modality in ("v", "av") else None
    )
    zero = Tensor(np.zeros((n, model.cfg.d), dtype=model.dtype))
    return concat([fa if fa is not None else zero, fv if fv is not None else zero], axis=1)


def task_loss(logits: Tensor, labels: np.ndarray, task: str) -> Tensor:
    if task == "ce":
        return cross_entropy(logits, np.argmax(labels, axis=1))
    return bce_with_logits(logits, labels)


@dataclass
class FinetuneStep:
    loss: Tensor
    modality: str
    head_input: Tensor


def finetune_step(
    model: SiameseAV,
    head: ClassifierHead,
    batch: tuple[np.ndarray, np.ndarray, np.ndarray],
    sampler: ModalitySampler,
    rng: np.random.Generator,
    task: str,
) -> FinetuneStep:
    """Draw an input type, encode without masking and score the head."""
    audio, images, labels = batch
    check_labels(labels, task)
    modality = sampler.draw(rng)
    x = head_input(model, audio, images, modality)
    return FinetuneStep(task_loss(head(x), labels, task), modality, x)


def finetune_epoch(
    model: SiameseAV,
    head: ClassifierHead,
    dataset: SyntheticDataset,
    optim: OptimState,
    train_cfg: TrainConfig,
    epoch: int,
    seed: int,
    max_steps: int | None = None,
) -> dict:
    phase = train_cfg.finetune
    sched = phase.schedule()
    lr = sched.lr(epoch)
    params = dict(model.parameters())
    head_params = {f"head.{k}": v for k, v in head.parameters().items()}
    params.update(head_params)
    scale = {k: phase.head_lr_multiplier for k in head_params}
    sampler = train_cfg.sampler()
    start = time.perf_counter()
    total, steps = 0.0, 0
    draws = {m: 0 for m in MODALITY_DRAWS}
    for step, idx in enumerate(batches(dataset.indices("train"), phase.batch_size, np.random.default_rng([seed, epoch, 2]))):
        if max_steps is not None and step >= max_steps:
            break
        for p in params.values():
            p.grad = None
        out = finetune_step(model, head, dataset.batch(idx), sampler, np.random.default_rng([seed, epoch, step, 3]), train_cfg.task)
        value = out.loss.item()
        if not math.isfinite(value):
            raise DivergenceError(f"finetune loss became {value} at epoch {epoch} step {step}")
        backward(out.loss)
        clip_gradients(params, train_cfg.clip_norm)
        adam_step(params, optim, lr, scale)
        total += value
        steps += 1
        draws[out.modality] += 1
    return {
        "epoch": epoch,
        "steps": steps,
        "lr": lr,
        "loss": total / max(steps, 1),
        "draws": draws,
        "wall_time": time.perf_counter() - start,
    }


def predict_proba(model, head, audio, images, modality: str, task: str, batch_size: int = 64) -> np.ndarray:
    out = []
    n = len(audio) if audio is not None else len(images)
    with no_grad():
        for s in range(0, n, batch_size):
            a = audio[s : s + batch_size] if audio is not None else None
            v = images[s : s + batch_size] if images is not None else None
            logits = head(head_input(model, a, v, modality)).data.astype(np.float64)
            if task == "ce":
                z = logits - logits.max(axis=1, keepdims=True)
                e = np.exp(z)
                out.append(e / e.sum(axis=1, keepdims=True))
            else:
                out.append(expit(logits))
    return np.concatenate(out, axis=0)


def aggregate_predictions(per_frame_probs) -> np.ndarray:
    """Average class probabilities over the frames of one clip."""
    frames = [np.asarray(p, dtype=np.float64) for p in per_frame_probs]
    if not frames:
        raise ValueError("need at least one frame of predictions")
    return np.mean(np.stack(frames), axis=0)


# -- checkpoints ---------------------------------------------------------------------


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _diff(a: dict, b: dict, prefix: str = "") -> list[str]:
    out = []
    for k in sorted(set(a) | set(b)):
        key = f"{prefix}{k}"
        if k not in a or k not in b:
            out.append(f"{key}: {a.get(k, '<absent>')!r} != {b.get(k, '<absent>')!r}")
        elif isinstance(a[k], dict) and isinstance(b[k], dict):
            out.extend(_diff(a[k], b[k], key + "."))
        elif a[k] != b[k]:
            out.append(f"{key}: {a[k]!r} != {b[k]!r}")
    return out


def header_path(path) -> Path:
    return Path(str(path) + ".json")


def save_checkpoint(
    path,
    model: SiameseAV,
    optim: OptimState | None = None,
    epoch: int = 0,
    seed: int = 0,
    config: dict | None = None,
    head: ClassifierHead | None = None,
    history: list | None = None,
    stage: str = "pretrain",
) -> None:
    """Tensors go to ``path`` (container format); the JSON header to ``path + '.json'``."""
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    if head is not None:
        tensors.update({f"head.{k}": v.data for k, v in head.parameters().items()})
    if optim is not None:
        for k in optim.m:
            tensors[f"optim.m.{k}"] = optim.m[k]
            tensors[f"optim.v.{k}"] = optim.v[k]
    cfg = config or {"model": model.cfg.to_dict()}
    header = {
        "format": "avsm-checkpoint-1",
        "stage": stage,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "model_hash": config_hash(model.cfg.to_dict()),
        "epoch": epoch,
        "rng": {"seed": seed, "next_epoch": epoch},
        "optim": None
        if optim is None
        else {
            "lr": optim.lr,
            "betas": list(optim.betas),
            "weight_decay": optim.weight_decay,
            "eps": optim.eps,
            "step": optim.step,
        },
        "head": None if head is None else {"d": head.d, "K": head.fc2.weight.shape[0]},
        "history": history or [],
    }
    write_tensor(path, tensors)
    _atomic_write(header_path(path), (json.dumps(header, indent=1, sort_keys=True) + "\n").encode())


def read_header(path) -> dict:
    return json.loads(header_path(path).read_text())


def load_checkpoint(
    path,
    model: SiameseAV | None = None,
    optim: OptimState | None = None,
    head: ClassifierHead | None = None,
    expected_config: dict | None = None,
) -> dict:
    """Restore state in place and return the header.

    The model config stored in the header must equal ``model.cfg``; when
    ``expected_config`` is given the whole run config must match as well.
    """
    header = read_header(path)
    if expected_config is not None and header["config_hash"] != config_hash(expected_config):
        diff = _diff(header["config"], expected_config)
        raise ConfigMismatchError("checkpoint config differs: " + "; ".join(diff[:10]))
    if model is not None:
        stored = header["config"]["model"]
        if stored != model.cfg.to_dict():
            diff = _diff(stored, model.cfg.to_dict(), "model.")
            raise ConfigMismatchError("checkpoint model config differs: " + "; ".join(diff[:10]))
    tensors = read_tensor(path)
    if model is not None:
        model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
    if head is not None:
        params = head.parameters()
        for k, p in params.items():
            key = f"head.{k}"
            if key not in tensors or tensors[key].shape != p.data.shape:
                raise ConfigMismatchError(f"checkpoint has no compatible {key}")
            p.data = np.array(tensors[key], dtype=p.data.dtype)
    if optim is not None and header.get("optim"):
        o = header["optim"]
        optim.step = o["step"]
        optim.lr, optim.betas = o["lr"], tuple(o["betas"])
        optim.weight_decay, optim.eps = o["weight_decay"], o["eps"]
        optim.m = {k[8:]: np.array(v) for k, v in tensors.items() if k.startswith("optim.m.")}
        optim.v = {k[8:]: np.array(v) for k, v in tensors.items() if k.startswith("optim.v.")}
    return header


def append_jsonl(path, record: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def state_equal(a: dict[str, np.ndarray], b: dict[str, np.ndarray]) -> bool:
    return a.keys() == b.keys() and all(
        a[k].dtype == b[k].dtype and a[k].tobytes() == b[k].tobytes() for k in a
    )

