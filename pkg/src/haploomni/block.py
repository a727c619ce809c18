"""Masked multi-head attention with rotary positions, KV caching, and the gated block."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .adaln import AdaLNLayer, StateMatrix, TimeEmbedding
from .numeric import silu


class CacheStateError(RuntimeError):
    """Mask extents and cached prefix length disagree."""


@dataclass(frozen=True)
class BlockConfig:
    d: int
    heads: int
    d_ff: int
    rope_enabled: bool = True

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.d_ff < self.d:
            raise ValueError(f"d_ff={self.d_ff} must be >= d={self.d}")
        if self.rope_enabled and (self.d // self.heads) % 4:
            raise ValueError("rotary positions need a head width divisible by 4")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads


class KVCache:
    """Per-layer keys/values of an already processed prefix."""

    def __init__(self, n_layers: int):
        self.keys: list[torch.Tensor | None] = [None] * n_layers
        self.values: list[torch.Tensor | None] = [None] * n_layers

    def layer_length(self, i: int) -> int:
        k = self.keys[i]
        return 0 if k is None else k.shape[-2]

    @property
    def length(self) -> int:
        lengths = {self.layer_length(i) for i in range(len(self.keys))}
        if len(lengths) > 1:
            raise CacheStateError(f"layers disagree on cached length: {sorted(lengths)}")
        return lengths.pop() if lengths else 0

    def append(self, i: int, k: torch.Tensor, v: torch.Tensor):
        if self.keys[i] is None:
            self.keys[i], self.values[i] = k, v
        else:
            self.keys[i] = torch.cat([self.keys[i], k], dim=-2)
            self.values[i] = torch.cat([self.values[i], v], dim=-2)
        return self.keys[i], self.values[i]


def _rotate_half(x: torch.Tensor) -> torch.Tensor:
    a, b = x.chunk(2, dim=-1)
    return torch.cat([-b, a], dim=-1)


def apply_rotary(x: torch.Tensor, positions: torch.Tensor, base: float = 10000.0) -> torch.Tensor:
    """Rotate ``x`` (``[B, H, L, hd]``) by 2-axis positions (``[L, 2]``).

    The first half of each head turns with the row index, the second with the
    column index. Text tokens use equal row and column indices, which makes
    this ordinary 1-D rotary attention for them.
    """
    hd = x.shape[-1]
    m = hd // 2
    inv = base ** (-torch.arange(0, m, 2, dtype=torch.float64) / m)
    out = []
    for axis, part in enumerate((x[..., :m], x[..., m:])):
        ang = positions[:, axis].to(torch.float64)[:, None] * inv
        ang = torch.cat([ang, ang], dim=-1).to(x.dtype)
        out.append(part * ang.cos() + _rotate_half(part) * ang.sin())
    return torch.cat(out, dim=-1)


def _init(shape, fan_in):
    return nn.Parameter(torch.randn(*shape) / math.sqrt(fan_in))


class HaploBlock(nn.Module):
    """AdaLN -> masked attention -> gated residual -> AdaLN -> FFN -> gated residual.

    The two AdaLN layers are owned by the enclosing decoder stack (blocks may
    share them) and are held here as plain references.
    """

    def __init__(self, cfg: BlockConfig, adaln_1: AdaLNLayer, adaln_2: AdaLNLayer):
        super().__init__()
        self.cfg = cfg
        d, d_ff = cfg.d, cfg.d_ff
        self.W_q = _init((d, d), d)
        self.W_k = _init((d, d), d)
        self.W_v = _init((d, d), d)
        self.W_o = _init((d, d), d)
        self.ffn_in = _init((d, d_ff), d)
        self.ffn_out = _init((d_ff, d), d_ff)
        object.__setattr__(self, "adaln_1", adaln_1)
        object.__setattr__(self, "adaln_2", adaln_2)

    def attention(
        self,
        h: torch.Tensor,
        mask: torch.Tensor,
        positions: torch.Tensor | None = None,
        cache: KVCache | None = None,
        layer_idx: int = 0,
    ) -> torch.Tensor:
        """``h`` is ``[B, L, d]``; ``mask`` is ``[L, cached + L]`` booleans."""
        B, L, d = h.shape
        H, hd = self.cfg.heads, self.cfg.head_dim
        cached = cache.layer_length(layer_idx) if cache is not None else 0
        if mask.shape != (L, cached + L):
            raise CacheStateError(
                f"mask extent {tuple(mask.shape)} does not match {L} new + {cached} cached tokens"
            )
        q = (h @ self.W_q).view(B, L, H, hd).transpose(1, 2)
        k = (h @ self.W_k).view(B, L, H, hd).transpose(1, 2)
        v = (h @ self.W_v).view(B, L, H, hd).transpose(1, 2)
        if self.cfg.rope_enabled and positions is not None:
            q = apply_rotary(q, positions)
            k = apply_rotary(k, positions)
        if cache is not None:
            k, v = cache.append(layer_idx, k, v)
        logits = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
        logits = logits.masked_fill(~mask, float("-inf"))
        w = torch.softmax(logits, dim=-1)
        out = (w @ v).transpose(1, 2).reshape(B, L, d)
        return out @ self.W_o

    def ffn(self, x: torch.Tensor) -> torch.Tensor:
        return silu(x @ self.ffn_in) @ self.ffn_out

    def forward(
        self,
        h: torch.Tensor,
        mask: torch.Tensor,
        states: StateMatrix | tuple[StateMatrix, StateMatrix] | TimeEmbedding,
        positions: torch.Tensor | None = None,
        cache: KVCache | None = None,
        layer_idx: int = 0,
    ) -> torch.Tensor:
        s1, s2 = self.resolve_states(states)
        x, gate1 = self.adaln_1(h, s1)
        h = h + gate1 * self.attention(x, mask, positions, cache, layer_idx)
        x, gate2 = self.adaln_2(h, s2)
        return h + gate2 * self.ffn(x)

    def resolve_states(self, states):
        if isinstance(states, TimeEmbedding):
            return (
                self.adaln_1.compute_state_matrix(states),
                self.adaln_2.compute_state_matrix(states),
            )
        if isinstance(states, StateMatrix):
            return states, states
        return states


def block_forward(blk: HaploBlock, h, mask, S, cache=None, positions=None, layer_idx: int = 0):
    squeeze = h.dim() == 2
    if squeeze:
        h = h[None]
    out = blk(h, mask, S, positions=positions, cache=cache, layer_idx=layer_idx)
    return out[0] if squeeze else out
