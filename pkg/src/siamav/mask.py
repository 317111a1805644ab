"""Random token masking with per-instance ratios drawn from a discrete set.

Each modality's batch is split evenly across the ratio set, so the number
of instances sharing a ratio (and therefore a kept-token count) is known
before sampling.  Instances with the same ratio form a bucket whose kept
tokens stack into one rectangular array.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .embed import AUDIO, VISUAL, TokenSet
from .tensor import ConfigError, take_rows

DEFAULT_RATIOS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
MULTI_RATIO_MAX = 0.5


class PlanError(ValueError):
    """A mask plan does not match the tokens it is applied to."""


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def mask_count(ratio: float, tokens: int) -> int:
    return round_half_away(ratio * tokens)


def check_ratios(ratios, multi: bool | None = None) -> tuple[float, ...]:
    ratios = tuple(float(r) for r in ratios)
    if not ratios:
        raise ConfigError("ratio set is empty")
    if len(set(ratios)) != len(ratios):
        raise ConfigError(f"ratio set has duplicates: {ratios}")
    if any(not 0.0 <= r < 1.0 for r in ratios):
        raise ConfigError(f"ratios must lie in [0, 1): {ratios}")
    if multi is None:
        multi = len(ratios) > 1
    if multi and max(ratios) > MULTI_RATIO_MAX:
        raise ConfigError(f"multi-ratio masking caps ratios at {MULTI_RATIO_MAX}: {ratios}")
    return ratios


@dataclass
class ModalityPlan:
    tokens: int
    ratios: np.ndarray  # (B,)
    kept: list[np.ndarray]
    masked: list[np.ndarray]

    @property
    def batch(self) -> int:
        return len(self.ratios)

    def kept_counts(self) -> np.ndarray:
        return np.array([len(k) for k in self.kept])


@dataclass
class Bucket:
    ratio: float
    instances: np.ndarray
    tokens: TokenSet


@dataclass
class MaskPlan:
    modalities: dict[str, ModalityPlan]
    buckets: dict[tuple[str, float], list[int]] = field(default_factory=dict)

    def __getitem__(self, modality: str) -> ModalityPlan:
        return self.modalities[modality]

    @property
    def batch(self) -> int:
        return next(iter(self.modalities.values())).batch

    def kept_tokens(self) -> int:
        return int(sum(p.kept_counts().sum() for p in self.modalities.values()))

    def total_tokens(self) -> int:
        return int(sum(p.tokens * p.batch for p in self.modalities.values()))


def _plan_modality(assigned: np.ndarray, tokens: int, rng: np.random.Generator) -> ModalityPlan:
    kept, masked = [], []
    for r in assigned:
        n = mask_count(r, tokens)
        perm = rng.permutation(tokens)
        masked.append(np.sort(perm[:n]))
        kept.append(np.sort(perm[n:]))
    return ModalityPlan(tokens, assigned, kept, masked)


def _bucket_index(plan: dict[str, ModalityPlan]) -> dict[tuple[str, float], list[int]]:
    buckets: dict[tuple[str, float], list[int]] = {}
    for mod, mp in plan.items():
        for r in sorted(set(mp.ratios.tolist())):
            buckets[(mod, r)] = [int(i) for i in np.flatnonzero(mp.ratios == r)]
    return buckets


def plan_multi_ratio(
    batch_size: int,
    tokens_audio: int,
    tokens_visual: int,
    ratios=DEFAULT_RATIOS,
    rng: np.random.Generator | None = None,
) -> MaskPlan:
    """Assign every ratio to exactly ``batch_size / len(ratios)`` instances per
    modality (independently for audio and visual), then mask a uniform
    random subset of each instance's tokens."""
    ratios = check_ratios(ratios)
    if rng is None:
        rng = np.random.default_rng()
    if batch_size % len(ratios):
        raise ConfigError(
            f"batch size {batch_size} is not divisible by the {len(ratios)} masking ratios"
        )
    per = batch_size // len(ratios)
    base = np.repeat(np.array(ratios), per)
    assigned = {AUDIO: rng.permutation(base), VISUAL: rng.permutation(base)}
    mods = {
        AUDIO: _plan_modality(assigned[AUDIO], tokens_audio, rng),
        VISUAL: _plan_modality(assigned[VISUAL], tokens_visual, rng),
    }
    return MaskPlan(mods, _bucket_index(mods))


def plan_fixed_ratio(
    batch_size: int,
    tokens_audio: int,
    tokens_visual: int,
    ratio: float,
    rng: np.random.Generator | None = None,
    visual_ratio: float | None = None,
) -> MaskPlan:
    """Mask every instance at one ratio (optionally a different one for visual)."""
    if visual_ratio is None:
        visual_ratio = ratio
    check_ratios([ratio], multi=False)
    check_ratios([visual_ratio], multi=False)
    if rng is None:
        rng = np.random.default_rng()
    mods = {
        AUDIO: _plan_modality(np.full(batch_size, float(ratio)), tokens_audio, rng),
        VISUAL: _plan_modality(np.full(batch_size, float(visual_ratio)), tokens_visual, rng),
    }
    return MaskPlan(mods, _bucket_index(mods))


def plan_masks(batch_size, tokens_audio, tokens_visual, ratios, rng) -> MaskPlan:
    """Fixed-ratio plan for a single ratio, multi-ratio plan otherwise."""
    ratios = tuple(ratios)
    if len(ratios) == 1:
        return plan_fixed_ratio(batch_size, tokens_audio, tokens_visual, ratios[0], rng)
    return plan_multi_ratio(batch_size, tokens_audio, tokens_visual, ratios, rng)


def full_plan(batch_size: int, tokens_audio: int, tokens_visual: int) -> MaskPlan:
    """Plan that keeps every token."""
    return plan_fixed_ratio(batch_size, tokens_audio, tokens_visual, 0.0, np.random.default_rng(0))


def expected_kept_fraction(ratios) -> float:
    ratios = list(ratios)
    if not ratios:
        raise ConfigError("ratio set is empty")
    return 1.0 - math.fsum(ratios) / len(ratios)


def gather_kept(tokens: TokenSet, plan: MaskPlan) -> list[Bucket]:
    """Split a full token set into per-ratio buckets of kept tokens.

    Kept tokens stay in ascending grid order and carry their positions.
    """
    mp = plan[tokens.modality]
    b, t, d = tokens.values.shape
    if mp.batch != b or mp.tokens != t:
        raise PlanError(
            f"plan covers {mp.batch}x{mp.tokens} {tokens.modality} tokens, got {b}x{t}"
        )
    flat = tokens.values.reshape(b * t, d)
    out = []
    for r in sorted(set(mp.ratios.tolist())):
        inst = np.flatnonzero(mp.ratios == r)
        pos = np.stack([mp.kept[i] for i in inst])
        if pos.size and (pos.max() >= t or pos.min() < 0):
            raise PlanError(f"kept index out of range for {t} tokens")
        rows = inst[:, None] * t + pos
        vals = take_rows(flat, rows)
        out.append(Bucket(r, inst, TokenSet(vals, pos, tokens.modality)))
    return out
