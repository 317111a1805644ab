"""Contrastive matching, masked reconstruction and classification losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .embed import AUDIO, VISUAL, PatchGrid, patchify_tensor
from .mask import MaskPlan
from .tensor import ConfigError, ShapeError, Tensor, log_softmax

RECON_MODES = ("full", "masked_only")


class DegenerateInputError(ValueError):
    """An embedding row has zero norm, so cosine similarity is undefined."""


@dataclass
class LossConfig:
    tau: float = 0.05
    symmetric: bool = True
    scale_contrastive: float = 1.0
    scale_reconstruction: float = 1.0
    recon_mode: str = "full"

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")
        if self.scale_contrastive < 0 or self.scale_reconstruction < 0:
            raise ConfigError("loss scalers must be nonnegative")
        if self.recon_mode not in RECON_MODES:
            raise ConfigError(f"recon_mode must be one of {RECON_MODES}, got {self.recon_mode!r}")

    def check_pretraining(self) -> None:
        if self.scale_contrastive == 0 and self.scale_reconstruction == 0:
            raise ConfigError("both loss scalers are zero; nothing to pretrain")


def _normalize_rows(x: Tensor, label: str) -> Tensor:
    sq = (x.data.astype(np.float64) ** 2).sum(axis=1)
    bad = np.flatnonzero(sq == 0)
    if bad.size:
        raise DegenerateInputError(f"{label} row {int(bad[0])} has zero norm")
    return x / (x * x).sum(axis=1, keepdims=True).sqrt()


def cosine_similarity_matrix(fa: Tensor, fv: Tensor) -> Tensor:
    """S[i, j] = cos(fa_i, fv_j)."""
    if fa.ndim != 2 or fv.ndim != 2 or fa.shape[1] != fv.shape[1]:
        raise ShapeError(f"expected (B, d) feature matrices, got {fa.shape} and {fv.shape}")
    return _normalize_rows(fa, "audio") @ _normalize_rows(fv, "visual").T


def contrastive_loss(fa: Tensor, fv: Tensor, tau: float = 0.05, symmetric: bool = True) -> Tensor:
    """InfoNCE over cosine similarities scaled by 1/tau.

    Audio-to-visual only when ``symmetric`` is false; otherwise the mean of
    both directions.
    """
    b = fa.shape[0]
    if b < 2:
        raise ShapeError(f"contrastive loss needs at least 2 pairs, got {b}")
    logits = cosine_similarity_matrix(fa, fv) * (1.0 / tau)
    eye = np.eye(b, dtype=logits.dtype)
    loss = -(log_softmax(logits, axis=1) * eye).sum() * (1.0 / b)
    if symmetric:
        back = -(log_softmax(logits, axis=0) * eye).sum() * (1.0 / b)
        loss = (loss + back) * 0.5
    return loss


def _grid_for(x: Tensor, patch: int) -> PatchGrid:
    h, w = x.shape[1], x.shape[2]
    c = x.shape[3] if x.ndim == 4 else 1
    return PatchGrid(h, w, c, patch)


def _masked_mse(rec: Tensor, target: Tensor, masked: list[np.ndarray], patch: int) -> Tensor:
    grid = _grid_for(target, patch)
    b = target.shape[0]
    sq = patchify_tensor((rec - target) ** 2, grid).sum(axis=2)  # (B, T)
    weight = np.zeros((b, grid.tokens), dtype=sq.dtype)
    for i, m in enumerate(masked):
        if len(m):
            weight[i, m] = 1.0 / (len(m) * grid.patch_dim)
    return (sq * weight).sum() * (1.0 / b)


def reconstruction_loss(
    image_rec: Tensor,
    image: np.ndarray | Tensor,
    audio_rec: Tensor,
    audio: np.ndarray | Tensor,
    plan: MaskPlan | None = None,
    mode: str = "full",
    patch: int = 16,
) -> Tensor:
    """Mean squared error of both reconstructions, averaged over the batch.

    ``full`` scores every element of the spectrogram and image.
    ``masked_only`` scores only the patches the plan withheld from the
    encoder; an instance with nothing masked contributes zero.
    """
    image = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=image_rec.dtype))
    audio = audio if isinstance(audio, Tensor) else Tensor(np.asarray(audio, dtype=audio_rec.dtype))
    if image_rec.shape != image.shape or audio_rec.shape != audio.shape:
        raise ShapeError(
            f"reconstruction shapes {image_rec.shape}/{audio_rec.shape} do not match "
            f"targets {image.shape}/{audio.shape}"
        )
    if mode == "full":
        return ((audio_rec - audio) ** 2).mean() + ((image_rec - image) ** 2).mean()
    if mode == "masked_only":
        if plan is None:
            raise ConfigError("masked_only reconstruction needs a mask plan")
        return _masked_mse(audio_rec, audio, plan[AUDIO].masked, patch) + _masked_mse(
            image_rec, image, plan[VISUAL].masked, patch
        )
    raise ConfigError(f"recon_mode must be one of {RECON_MODES}, got {mode!r}")


def total_pretrain_loss(contrastive, reconstruction, scale_contrastive=1.0, scale_reconstruction=1.0):
    """Weighted sum; a term with scale 0 is dropped rather than multiplied by 0."""
    total = None
    for scale, part in ((scale_contrastive, contrastive), (scale_reconstruction, reconstruction)):
        if scale == 0 or part is None:
            continue
        term = part * scale
        total = term if total is None else total + term
    return 0.0 if total is None else total


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ConfigError(f"cross entropy needs {n} integer labels in [0, {k})")
    onehot = np.zeros((n, k), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1
    return -(log_softmax(logits, axis=1) * onehot).sum() * (1.0 / n)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross entropy, stable for large |logits|."""
    y = np.asarray(targets, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise ConfigError(f"targets {y.shape} do not match logits {logits.shape}")
    x = logits.data
    sig = expit(x)
    val = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    n = x.size
    return Tensor._make(
        np.asarray(val.mean(), dtype=x.dtype), (logits,), lambda g: (g * (sig - y) / n,), "bce"
    )
