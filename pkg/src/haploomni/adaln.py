"""Multimodal AdaLN: timestep-derived expert state plus per-token expert mixing."""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import torch
from torch import nn

from .numeric import LN_EPS, DimensionError, layer_norm, silu, softmax

SCALE, SHIFT, GATE = 0, 1, 2
COND, NOISE = 0, 1


@dataclass(frozen=True)
class TimeEmbedding:
    theta: torch.Tensor
    t: int | None = None
    null_flag: bool = False

    def __post_init__(self):
        if self.null_flag and self.t is not None:
            raise ValueError("a null time embedding carries no timestep")


@dataclass(frozen=True)
class StateMatrix:
    """Rows (scale, shift, gate) by columns (cond, noise), each entry a d-vector.

    ``entries`` has shape ``[3, 2, d]``, or ``[B, 3, 2, d]`` when every sample
    in a batch carries its own timestep.
    """

    entries: torch.Tensor

    @property
    def d(self) -> int:
        return self.entries.shape[-1]

    def get(self, row: int, col: int) -> torch.Tensor:
        return self.entries[..., row, col, :]

    @classmethod
    def zeros(cls, d: int, dtype=torch.float32) -> "StateMatrix":
        return cls(torch.zeros(3, 2, d, dtype=dtype))


class AdaLNLayer(nn.Module):
    """Holds ``W_Ada`` (d_t x 6d) and the switch projection ``W_MAL`` (d x 2)."""

    def __init__(self, d: int, d_t: int, ln_eps: float = LN_EPS, init_std: float = 0.02):
        super().__init__()
        self.d = d
        self.d_t = d_t
        self.ln_eps = ln_eps
        self.W_Ada = nn.Parameter(torch.randn(d_t, 6 * d) * init_std)
        self.W_MAL = nn.Parameter(torch.randn(d, 2) * init_std)
        self._cache: dict[tuple, StateMatrix] = {}
        self._lock = threading.Lock()

    def compute_state_matrix(self, emb: TimeEmbedding) -> StateMatrix:
        """Return ``reshape(SiLU(theta) @ W_Ada, [3, 2, d])``.

        Outside autograd the result is memoised per timestep and invalidated
        whenever ``W_Ada`` (or a learned null theta) is updated in place.
        """
        theta = emb.theta
        if theta.shape[-1] != self.d_t:
            raise DimensionError(
                f"time embedding width {theta.shape[-1]} does not match d_t={self.d_t}"
            )
        use_cache = not torch.is_grad_enabled() and not emb.null_flag
        key = None
        if use_cache and emb.t is not None:
            key = (emb.t, self.W_Ada._version, self.W_Ada.dtype, theta.dtype)
            with self._lock:
                hit = self._cache.get(key)
            if hit is not None:
                return hit
        flat = silu(theta) @ self.W_Ada
        S = StateMatrix(flat.reshape(*theta.shape[:-1], 3, 2, self.d))
        if key is not None:
            with self._lock:
                if len(self._cache) > 4096:
                    self._cache.clear()
                self._cache[key] = S
        return S

    def clear_cache(self) -> None:
        with self._lock:
            self._cache.clear()

    def switch_scores(self, h: torch.Tensor) -> torch.Tensor:
        if h.shape[-1] != self.d:
            raise DimensionError(f"feature width {h.shape[-1]} does not match d={self.d}")
        return softmax(silu(h) @ self.W_MAL, axis=-1)

    def forward(
        self, h: torch.Tensor, S: StateMatrix, delta: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Modulated normalisation of ``h`` (``[..., L, d]``).

        Returns ``(h_tilde, ada_gate)``. ``delta`` overrides the switch scores,
        which is how the single-expert reductions are exercised.
        """
        if delta is None:
            delta = self.switch_scores(h)
        if S.entries.dim() == 3:
            # [.., L, 2] x [3, 2, d] -> [.., L, 3, d]
            mixed = torch.einsum("...k,rkd->...rd", delta, S.entries)
        else:
            # per-sample state: [B, L, 2] x [B, 3, 2, d]
            mixed = torch.einsum("blk,brkd->blrd", delta, S.entries)
        scale, shift, gate = mixed.unbind(dim=-2)
        h_tilde = (scale + 1) * layer_norm(h, self.ln_eps) + shift
        return h_tilde, gate


def multimodal_adaln(layer: AdaLNLayer, h: torch.Tensor, S: StateMatrix):
    return layer(h, S)


def single_expert_adaln(h: torch.Tensor, S: StateMatrix, column: int, eps: float = LN_EPS):
    """Plain AdaLN driven by one expert column only."""
    scale = S.entries[..., SCALE, column, :]
    shift = S.entries[..., SHIFT, column, :]
    gate = S.entries[..., GATE, column, :]
    if S.entries.dim() == 4:
        scale, shift, gate = scale[:, None], shift[:, None], gate[:, None]
    return (scale + 1) * layer_norm(h, eps) + shift, gate.expand_as(h)


def sinusoidal(t: int | torch.Tensor, d_t: int, max_period: float = 10000.0, dtype=torch.float32):
    half = d_t // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64) / half
    )
    t = torch.as_tensor(t, dtype=torch.float64)
    args = t[..., None] * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if d_t % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[..., :1])], dim=-1)
    return emb.to(dtype)
