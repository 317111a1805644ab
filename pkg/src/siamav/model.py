"""Shared audio-visual encoder, joint fusion blocks and reconstruction decoder."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from .embed import (
    AUDIO,
    VISUAL,
    PatchGrid,
    TokenSet,
    derive_audio_projection,
    embed_modality,
    unpatchify_tensor,
)
from .mask import MaskPlan, PlanError, gather_kept
from .tensor import (
    ConfigError,
    Tensor,
    concat,
    gelu,
    layer_norm,
    linear,
    multi_head_attention,
    resolve_dtype,
    stop_gradient,
    take_rows,
)

LN_EPS = 1e-5
PAD_BIAS = -1e9


@dataclass
class ModelConfig:
    image_size: tuple[int, int] = (224, 224)
    audio_size: tuple[int, int] = (1024, 128)
    patch: int = 16
    d: int = 768
    encoder_depth: int = 12
    heads: int = 12
    mlp_ratio: float = 4.0
    mm_depth: int = 2
    dec_depth: int = 6
    dec_width: int | None = None
    dec_heads: int | None = None
    shared_encoder: bool = True
    modality_embedding: bool = False
    dtype: str = "f32"

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        self.audio_size = tuple(self.audio_size)
        if self.dec_width is None:
            self.dec_width = self.d // 2
        if self.dec_heads is None:
            self.dec_heads = self.heads
        if self.d % self.heads:
            raise ConfigError(f"width {self.d} is not divisible by {self.heads} heads")
        if self.dec_width % self.dec_heads:
            raise ConfigError(
                f"decoder width {self.dec_width} is not divisible by {self.dec_heads} heads"
            )
        resolve_dtype(self.dtype)
        self.visual_grid, self.audio_grid  # validates geometry

    @property
    def visual_grid(self) -> PatchGrid:
        return PatchGrid(self.image_size[0], self.image_size[1], 3, self.patch)

    @property
    def audio_grid(self) -> PatchGrid:
        return PatchGrid(self.audio_size[0], self.audio_size[1], 1, self.patch)

    @property
    def hidden(self) -> int:
        return int(self.d * self.mlp_ratio)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["image_size"] = list(self.image_size)
        out["audio_size"] = list(self.audio_size)
        return out


# -- parameter containers ----------------------------------------------------


class Module:
    """Walks attributes to enumerate learnable tensors in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    yield from m.named_parameters(f"{full}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters().values())


def _param(data: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def xavier(rng: np.random.Generator, fan_out: int, fan_in: int, dtype) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return _param(rng.uniform(-bound, bound, size=(fan_out, fan_in)), dtype)


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng, dtype, bias: bool = True):
        self.weight = xavier(rng, fan_out, fan_in, dtype)
        self.bias = _param(np.zeros(fan_out), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, dtype):
        self.weight = _param(np.ones(d), dtype)
        self.bias = _param(np.zeros(d), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias, LN_EPS)


class Block(Module):
    """Pre-norm transformer block: x + MHA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, d: int, heads: int, hidden: int, rng, dtype):
        self.heads = heads
        self.norm1 = LayerNorm(d, dtype)
        self.qkv = Linear(d, 3 * d, rng, dtype)
        self.proj = Linear(d, d, rng, dtype)
        self.norm2 = LayerNorm(d, dtype)
        self.fc1 = Linear(d, hidden, rng, dtype)
        self.fc2 = Linear(hidden, d, rng, dtype)

    def attention(self, x: Tensor, key_bias: np.ndarray | None = None) -> Tensor:
        d = x.shape[-1]
        qkv = self.qkv(x)
        q, k, v = qkv[..., :d], qkv[..., d : 2 * d], qkv[..., 2 * d :]
        return multi_head_attention(
            q, k, v, self.heads, self.proj.weight, self.proj.bias, key_bias=key_bias
        )

    def __call__(self, x: Tensor, key_bias: np.ndarray | None = None) -> Tensor:
        x = x + self.attention(self.norm1(x), key_bias)
        return x + self.fc2(gelu(self.fc1(self.norm2(x))))


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.blocks = [Block(cfg.d, cfg.heads, cfg.hidden, rng, dtype) for _ in range(cfg.encoder_depth)]
        self.norm = LayerNorm(cfg.d, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


@dataclass
class EncoderOutput:
    """Encoded tokens (possibly padded, see ``TokenSet.lengths``) and their mean."""

    tokens: TokenSet
    pooled: Tensor


# -- the model -----------------------------------------------------------------


class SiameseAV(Module):
    """One transformer encoder applied to both audio and visual tokens.

    With ``shared_encoder=False`` the audio and visual streams get disjoint
    encoder weights instead; everything else is unchanged.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        dtype = resolve_dtype(cfg.dtype)
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        vg, ag = cfg.visual_grid, cfg.audio_grid
        d = cfg.d

        self.image_proj = xavier(rng, d, vg.patch_dim, dtype)
        self.audio_proj = _param(derive_audio_projection(self.image_proj.data), dtype)
        self.pos_visual = _param(rng.normal(0, 0.02, (vg.tokens, d)), dtype)
        self.pos_audio = _param(rng.normal(0, 0.02, (ag.tokens, d)), dtype)
        if cfg.modality_embedding:
            self.type_audio = _param(rng.normal(0, 0.02, d), dtype)
            self.type_visual = _param(rng.normal(0, 0.02, d), dtype)

        if cfg.shared_encoder:
            self.encoder = Encoder(cfg, rng, dtype)
        else:
            self.audio_encoder = Encoder(cfg, rng, dtype)
            self.visual_encoder = Encoder(cfg, rng, dtype)

        source = self.encoder_for(VISUAL).blocks
        if len(source) >= cfg.mm_depth:
            picked = source[len(source) - cfg.mm_depth :] if cfg.mm_depth else []
            self.mm_blocks = [_clone_block(b) for b in picked]
        else:
            self.mm_blocks = [Block(d, cfg.heads, cfg.hidden, rng, dtype) for _ in range(cfg.mm_depth)]
        self.mm_norm = LayerNorm(d, dtype)

        dw = cfg.dec_width
        self.dec_embed = Linear(d, dw, rng, dtype)
        self.mask_token = _param(rng.normal(0, 0.02, dw), dtype)
        self.dec_pos = _param(rng.normal(0, 0.02, (ag.tokens + vg.tokens, dw)), dtype)
        hidden = int(dw * cfg.mlp_ratio)
        self.dec_blocks = [Block(dw, cfg.dec_heads, hidden, rng, dtype) for _ in range(cfg.dec_depth)]
        self.dec_norm = LayerNorm(dw, dtype)
        self.head_audio = Linear(dw, ag.patch_dim, rng, dtype)
        self.head_visual = Linear(dw, vg.patch_dim, rng, dtype)

    # -- grouping ------------------------------------------------------------

    def encoder_for(self, modality: str) -> Encoder:
        if self.cfg.shared_encoder:
            return self.encoder
        return self.audio_encoder if modality == AUDIO else self.visual_encoder

    def encoder_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.parameters().items() if "encoder." in k}

    def decoder_parameters(self) -> dict[str, Tensor]:
        keys = ("dec_", "mask_token", "head_audio", "head_visual")
        return {k: v for k, v in self.parameters().items() if k.startswith(keys)}

    # -- stages --------------------------------------------------------------

    def embed(self, x: np.ndarray, modality: str) -> TokenSet:
        if modality == AUDIO:
            grid, proj, pos = self.cfg.audio_grid, self.audio_proj, self.pos_audio
        elif modality == VISUAL:
            grid, proj, pos = self.cfg.visual_grid, self.image_proj, self.pos_visual
        else:
            raise ConfigError(f"unknown modality {modality!r}")
        typ = getattr(self, f"type_{modality}", None) if self.cfg.modality_embedding else None
        return embed_modality(np.asarray(x, dtype=self.dtype), grid, proj, pos, modality, typ)

    def encode(self, tokens: TokenSet, modality: str | None = None) -> EncoderOutput:
        """Run the encoder on a rectangular token set and mean-pool the result."""
        modality = modality or tokens.modality
        if tokens.values.shape[-1] != self.cfg.d:
            raise ConfigError(
                f"token width {tokens.values.shape[-1]} does not match model width {self.cfg.d}"
            )
        out = self.encoder_for(modality)(tokens.values)
        return EncoderOutput(TokenSet(out, tokens.positions, modality), out.mean(axis=1))

    def encode_masked(self, tokens: TokenSet, plan: MaskPlan) -> EncoderOutput:
        """Encode only the kept tokens, one bucket at a time, and reassemble the
        batch in instance order (tokens padded to the longest instance)."""
        b = tokens.batch
        buckets = gather_kept(tokens, plan)
        outs = [self.encode(bk.tokens, tokens.modality) for bk in buckets]
        pooled_rows = np.empty(b, dtype=np.intp)
        offset = 0
        for bk in buckets:
            pooled_rows[bk.instances] = offset + np.arange(len(bk.instances))
            offset += len(bk.instances)
        pooled = take_rows(concat([o.pooled for o in outs], axis=0), pooled_rows)

        d = self.cfg.d
        lengths = np.zeros(b, dtype=np.intp)
        for bk in buckets:
            lengths[bk.instances] = bk.tokens.count
        width = int(lengths.max())
        flat = [o.tokens.values.reshape(-1, d) for o in outs]
        total = sum(f.shape[0] for f in flat)
        zero = Tensor(np.zeros((1, d), dtype=self.dtype))
        index = np.full((b, width), total, dtype=np.intp)
        positions = np.full((b, width), -1, dtype=np.intp)
        offset = 0
        for bk, o in zip(buckets, outs):
            n = bk.tokens.count
            for j, inst in enumerate(bk.instances):
                index[inst, :n] = offset + j * n + np.arange(n)
                positions[inst, :n] = bk.tokens.positions[j]
            offset += len(bk.instances) * n
        values = take_rows(concat(flat + [zero], axis=0), index)
        return EncoderOutput(TokenSet(values, positions, tokens.modality, lengths), pooled)

    def fuse(self, audio: EncoderOutput, visual: EncoderOutput) -> TokenSet:
        """Joint self-attention over unmasked audio tokens followed by unmasked
        visual tokens.  Inputs are detached: nothing downstream of this stage
        sends gradient into the encoder."""
        a, v = audio.tokens, visual.tokens
        b, d = a.batch, self.cfg.d
        la = a.lengths if a.lengths is not None else np.full(b, a.count)
        lv = v.lengths if v.lengths is not None else np.full(b, v.count)
        lengths = la + lv
        width = int(lengths.max())
        offset_v = self.cfg.audio_grid.tokens
        src = concat(
            [
                stop_gradient(a.values).reshape(-1, d),
                stop_gradient(v.values).reshape(-1, d),
                Tensor(np.zeros((1, d), dtype=self.dtype)),
            ],
            axis=0,
        )
        pad_row = b * a.count + b * v.count
        index = np.full((b, width), pad_row, dtype=np.intp)
        positions = np.full((b, width), -1, dtype=np.intp)
        for i in range(b):
            na, nv = la[i], lv[i]
            index[i, :na] = i * a.count + np.arange(na)
            index[i, na : na + nv] = b * a.count + i * v.count + np.arange(nv)
            positions[i, :na] = a.positions[i, :na]
            positions[i, na : na + nv] = v.positions[i, :nv] + offset_v
        x = take_rows(src, index)
        key_bias = np.where(np.arange(width)[None, :] < lengths[:, None], 0.0, PAD_BIAS)
        for blk in self.mm_blocks:
            x = blk(x, key_bias)
        x = self.mm_norm(x)
        return TokenSet(x, positions, "joint", lengths)

    def reinsert(self, fused: TokenSet, plan: MaskPlan | None = None) -> TokenSet:
        """Project fused tokens to decoder width and scatter them to their joint
        grid slots; every other slot gets the learnable mask token."""
        b, width = fused.batch, fused.count
        ka, nv = self.cfg.audio_grid.tokens, self.cfg.visual_grid.tokens
        slots = ka + nv
        lengths = fused.lengths if fused.lengths is not None else np.full(b, width)
        if plan is not None:
            for mod, off in ((AUDIO, 0), (VISUAL, ka)):
                mp = plan[mod]
                for i in range(b):
                    if np.intersect1d(mp.kept[i], mp.masked[i]).size:
                        raise PlanError(f"instance {i}: {mod} kept and masked positions overlap")
        x = self.dec_embed(fused.values)
        dw = x.shape[-1]
        mask_row = b * width
        src = concat([x.reshape(-1, dw), self.mask_token.reshape(1, dw)], axis=0)
        index = np.full((b, slots), mask_row, dtype=np.intp)
        for i in range(b):
            pos = fused.positions[i, : lengths[i]]
            if np.unique(pos).size != pos.size or pos.min(initial=0) < 0 or pos.max(initial=0) >= slots:
                raise PlanError(f"instance {i}: fused token positions collide or fall off the grid")
            index[i, pos] = i * width + np.arange(lengths[i])
            if plan is not None:
                expected = np.concatenate([plan[AUDIO].masked[i], plan[VISUAL].masked[i] + ka])
                if not np.array_equal(np.sort(np.flatnonzero(index[i] == mask_row)), np.sort(expected)):
                    raise PlanError(f"instance {i}: fused tokens disagree with the mask plan")
        positions = np.broadcast_to(np.arange(slots), (b, slots)).copy()
        return TokenSet(take_rows(src, index), positions, "joint", source=index)

    def decode(self, fused: TokenSet, plan: MaskPlan | None = None) -> tuple[Tensor, Tensor]:
        """Return the reconstructed images (B, H, W, 3) and spectrograms (B, H, W)."""
        x = self.reinsert(fused, plan).values + self.dec_pos
        for blk in self.dec_blocks:
            x = blk(x)
        x = self.dec_norm(x)
        ka = self.cfg.audio_grid.tokens
        audio = self.head_audio(x[:, :ka])
        image = self.head_visual(x[:, ka:])
        return (
            unpatchify_tensor(image, self.cfg.visual_grid),
            unpatchify_tensor(audio, self.cfg.audio_grid),
        )

    # -- convenience ---------------------------------------------------------

    def features(self, audio: np.ndarray | None = None, images: np.ndarray | None = None):
        """Pooled features of unmasked inputs; ``None`` for an absent modality."""
        fa = self.encode(self.embed(audio, AUDIO)).pooled if audio is not None else None
        fv = self.encode(self.embed(images, VISUAL)).pooled if images is not None else None
        return fa, fv

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for k, p in params.items():
            if state[k].shape != p.data.shape:
                raise ValueError(f"{k}: shape {state[k].shape} vs {p.data.shape}")
            p.data = np.array(state[k], dtype=self.dtype)


def _clone_block(block: Block) -> Block:
    new = copy.copy(block)
    for name, val in vars(block).items():
        if isinstance(val, Module):
            setattr(new, name, _clone_module(val))
    return new


def _clone_module(m: Module) -> Module:
    new = copy.copy(m)
    for name, val in vars(m).items():
        if isinstance(val, Tensor):
            setattr(new, name, Tensor(val.data.copy(), requires_grad=val.requires_grad))
    return new


def _block_params(d: int, hidden: int) -> int:
    return 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * hidden + hidden) + (hidden * d + d)


def count_parameters(cfg: ModelConfig) -> dict[str, int]:
    """Learnable scalar counts per component, computed from the config alone."""
    d, dw = cfg.d, cfg.dec_width
    vg, ag = cfg.visual_grid, cfg.audio_grid
    n_enc = 1 if cfg.shared_encoder else 2
    parts = {
        "embed": d * vg.patch_dim + d * ag.patch_dim + vg.tokens * d + ag.tokens * d
        + (2 * d if cfg.modality_embedding else 0),
        "encoder_blocks": n_enc * cfg.encoder_depth * _block_params(d, cfg.hidden),
        "encoder_norm": n_enc * 2 * d,
        "mm": cfg.mm_depth * _block_params(d, cfg.hidden) + 2 * d,
        "decoder": (d * dw + dw) + dw + (ag.tokens + vg.tokens) * dw
        + cfg.dec_depth * _block_params(dw, int(dw * cfg.mlp_ratio))
        + 2 * dw
        + (dw * ag.patch_dim + ag.patch_dim)
        + (dw * vg.patch_dim + vg.patch_dim),
    }
    parts["total"] = sum(parts.values())
    return parts
