"""Patch embedding for images and spectrograms.

Patches are flattened row-major within the patch with the channel index
fastest, i.e. element ``(py, px, c)`` lands at ``(py * patch + px) * C + c``.
Grids are scanned row-major, so token ``t`` is patch
``(t // cols, t % cols)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, linear

AUDIO = "audio"
VISUAL = "visual"
MODALITIES = (AUDIO, VISUAL)


class GeometryError(ValueError):
    """Input dimensions do not fit the patch grid."""


@dataclass(frozen=True)
class PatchGrid:
    input_h: int
    input_w: int
    channels: int
    patch: int

    def __post_init__(self):
        if self.patch < 1 or self.input_h % self.patch or self.input_w % self.patch:
            raise GeometryError(
                f"patch {self.patch} does not tile a {self.input_h}x{self.input_w} input"
            )

    @property
    def rows(self) -> int:
        return self.input_h // self.patch

    @property
    def cols(self) -> int:
        return self.input_w // self.patch

    @property
    def tokens(self) -> int:
        return self.rows * self.cols

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch * self.patch

    @property
    def input_shape(self) -> tuple[int, ...]:
        if self.channels == 1:
            return (self.input_h, self.input_w)
        return (self.input_h, self.input_w, self.channels)


@dataclass
class TokenSet:
    """Embedded tokens of one modality for a batch.

    ``values`` is (B, T, d); ``positions[b, t]`` is the grid index the token
    came from.  ``lengths`` marks how many leading rows per instance are
    real when the set is padded (``None`` means all rows are real).
    ``source`` optionally records which upstream row fed each token.
    """

    values: Tensor
    positions: np.ndarray
    modality: str
    lengths: np.ndarray | None = None
    source: np.ndarray | None = None

    @property
    def batch(self) -> int:
        return self.values.shape[0]

    @property
    def count(self) -> int:
        return self.values.shape[1]


def patchify(x: np.ndarray, patch: int) -> np.ndarray:
    """(H, W[, C]) -> (tokens, C * patch**2) for a single instance."""
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[..., None]
    if x.ndim != 3:
        raise GeometryError(f"patchify expects (H, W) or (H, W, C), got {x.shape}")
    h, w, c = x.shape
    if patch < 1 or h % patch or w % patch:
        raise GeometryError(f"patch {patch} does not tile a {h}x{w} input")
    r, q = h // patch, w // patch
    return x.reshape(r, patch, q, patch, c).transpose(0, 2, 1, 3, 4).reshape(r * q, patch * patch * c)


def patchify_batch(x: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """(B, H, W[, C]) -> (B, tokens, patch_dim)."""
    x = np.asarray(x)
    if x.shape[1:] != grid.input_shape:
        raise GeometryError(f"expected inputs of shape {grid.input_shape}, got {x.shape[1:]}")
    b = x.shape[0]
    p, c = grid.patch, grid.channels
    x = x.reshape(b, grid.rows, p, grid.cols, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, grid.tokens, grid.patch_dim)


def unpatchify(p: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Exact inverse of :func:`patchify` for one instance."""
    p = np.asarray(p)
    if p.shape != (grid.tokens, grid.patch_dim):
        raise GeometryError(
            f"expected ({grid.tokens}, {grid.patch_dim}) patches, got {p.shape}"
        )
    s, c = grid.patch, grid.channels
    x = p.reshape(grid.rows, grid.cols, s, s, c).transpose(0, 2, 1, 3, 4)
    return x.reshape(grid.input_shape)


def unpatchify_tensor(p: Tensor, grid: PatchGrid) -> Tensor:
    """Differentiable batched inverse: (B, tokens, patch_dim) -> (B, H, W[, C])."""
    if p.shape[1:] != (grid.tokens, grid.patch_dim):
        raise GeometryError(
            f"expected (*, {grid.tokens}, {grid.patch_dim}) patches, got {p.shape}"
        )
    b = p.shape[0]
    s, c = grid.patch, grid.channels
    x = p.reshape(b, grid.rows, grid.cols, s, s, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, *grid.input_shape)


def patchify_tensor(x: Tensor, grid: PatchGrid) -> Tensor:
    b = x.shape[0]
    s, c = grid.patch, grid.channels
    x = x.reshape(b, grid.rows, s, grid.cols, s, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, grid.tokens, grid.patch_dim)


def _residual(x: float, y: float, z: float, q: float) -> float:
    # x + y + z - 3q, correctly rounded (3q is never formed, so nothing is lost)
    return math.fsum((x, y, z, -q, -q, -q))


def _mean3(x: float, y: float, z: float) -> float:
    """Correctly rounded (x + y + z) / 3; ties go to the even significand."""
    q = math.fsum((x, y, z)) / 3
    cands = [q]
    lo = hi = q
    for _ in range(2):
        lo, hi = math.nextafter(lo, -math.inf), math.nextafter(hi, math.inf)
        cands += [lo, hi]
    best, best_r = q, abs(_residual(x, y, z, q))
    for c in cands[1:]:
        r = abs(_residual(x, y, z, c))
        if r < best_r or (r == best_r and int(math.frexp(c)[0] * 2**53) % 2 == 0):
            best, best_r = c, r
    return best


def derive_audio_projection(image_proj: np.ndarray) -> np.ndarray:
    """Average an RGB patch kernel (d, 3 * p**2) into a one-channel kernel (d, p**2).

    The channel mean is correctly rounded in float64, so three equal slices
    give back that slice exactly.
    """
    w = np.asarray(image_proj)
    if w.ndim != 2 or w.shape[1] % 3:
        raise GeometryError(f"image projection inner dim must be divisible by 3, got {w.shape}")
    r, g, b = (w[:, c::3].astype(np.float64) for c in range(3))
    out = np.fromiter(
        (_mean3(x, y, z) for x, y, z in zip(r.ravel().tolist(), g.ravel().tolist(), b.ravel().tolist())),
        dtype=np.float64,
        count=r.size,
    ).reshape(r.shape)
    return out.astype(w.dtype if w.dtype in (np.float32, np.float64) else np.float64)


def embed_modality(
    x: np.ndarray,
    grid: PatchGrid,
    proj: Tensor,
    pos: Tensor,
    modality: str,
    type_embedding: Tensor | None = None,
) -> TokenSet:
    """Embed a batch (B, H, W[, C]) into tokens ``patches @ proj.T + pos``."""
    x = np.asarray(x)
    if x.ndim == len(grid.input_shape):
        x = x[None]
    patches = Tensor(patchify_batch(x, grid).astype(proj.dtype, copy=False))
    tokens = linear(patches, proj) + pos
    if type_embedding is not None:
        tokens = tokens + type_embedding
    positions = np.broadcast_to(np.arange(grid.tokens), (x.shape[0], grid.tokens)).copy()
    return TokenSet(tokens, positions, modality)
