"""Pre/post connectors and per-modality feature pre-scaling."""
from __future__ import annotations

from typing import Iterable

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError
from torch import nn

from .masking import TokenType, TokenTypeSequence
from .numeric import LN_EPS, DimensionError, layer_norm, silu, softmax


class CalibrationError(ValueError):
    pass


class Connector(nn.Module):
    """Per-token router between a normalise-and-project path and pass-through.

    ``X~ = SiLU(LN(X)) W'`` and ``P = softmax(SiLU(X) W_SN)``. Soft routing
    mixes ``P0 * X~ + P1 * X``; hard routing picks the argmax path per token
    and is inference-only.
    """

    def __init__(self, d: int, ln_eps: float = LN_EPS, routing_mode: str = "soft"):
        super().__init__()
        self.d = d
        self.ln_eps = ln_eps
        self.W_prime = nn.Parameter(torch.eye(d) + torch.randn(d, d) * 0.02)
        self.W_SN = nn.Parameter(torch.randn(d, 2) * 0.02)
        self.routing_mode = routing_mode

    @property
    def routing_mode(self) -> str:
        return self._routing_mode

    @routing_mode.setter
    def routing_mode(self, mode: str):
        if mode not in ("soft", "hard"):
            raise ValueError(f"routing_mode must be 'soft' or 'hard', got {mode!r}")
        self._routing_mode = mode

    def transformed(self, X: torch.Tensor) -> torch.Tensor:
        return silu(layer_norm(X, self.ln_eps)) @ self.W_prime

    def scores(self, X: torch.Tensor) -> torch.Tensor:
        return softmax(silu(X) @ self.W_SN, axis=-1)

    def forward(self, X: torch.Tensor, scores: torch.Tensor | None = None) -> torch.Tensor:
        if X.shape[-1] != self.d:
            raise DimensionError(f"connector expects width {self.d}, got {X.shape[-1]}")
        Xt = self.transformed(X)
        P = self.scores(X) if scores is None else scores
        if self.routing_mode == "hard":
            if torch.is_grad_enabled() and self.training and X.requires_grad:
                raise RuntimeError("hard routing is inference-only")
            pick = (P.argmax(dim=-1) == 0)[..., None]
            return torch.where(pick, Xt, X)
        return P[..., :1] * Xt + P[..., 1:] * X


def connector_forward(c: Connector, X: torch.Tensor) -> torch.Tensor:
    return c(X)


def _rms(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.mean(x * x)))


class PreScaler(BaseEstimator, TransformerMixin):
    """Frozen per-modality gains that bring each modality to a shared RMS.

    ``fit`` consumes ``(features, TokenTypeSequence)`` pairs with features of
    shape ``[L, d]`` or ``[B, L, d]`` and sets ``gamma[m] = target_rms / RMS_m``.
    Unfitted, every gain is 1 and ``transform`` is the identity.
    """

    def __init__(self, target_rms: float = 1.0, types: tuple[str, ...] = ("T", "V", "S", "N")):
        self.target_rms = target_rms
        self.types = types

    @property
    def calibrated(self) -> bool:
        return hasattr(self, "gamma_")

    @property
    def gamma(self) -> dict[TokenType, float]:
        if not self.calibrated:
            return {TokenType(c): 1.0 for c in self.types}
        return {TokenType(c): g for c, g in self.gamma_.items()}

    def fit(self, batches: Iterable[tuple], y=None):
        if not self.target_rms > 0:
            raise CalibrationError(f"target_rms must be positive, got {self.target_rms}")
        sq = {c: 0.0 for c in self.types}
        count = {c: 0 for c in self.types}
        for feats, seq in batches:
            X = feats.detach().cpu().double().numpy() if torch.is_tensor(feats) else np.asarray(feats, dtype=np.float64)
            for c in self.types:
                pos = seq.positions_of(TokenType(c))
                if len(pos) == 0:
                    continue
                sel = X[..., pos, :]
                sq[c] += float(np.sum(sel * sel))
                count[c] += sel.size
        missing = [c for c in self.types if count[c] == 0]
        if missing:
            raise CalibrationError(f"calibration stream lacks token types: {', '.join(missing)}")
        gamma = {}
        for c in self.types:
            rms = np.sqrt(sq[c] / count[c])
            if not rms > 0:
                raise CalibrationError(f"token type {c} has zero RMS in the calibration stream")
            gamma[c] = float(self.target_rms / rms)
        self.gamma_ = gamma
        return self

    def row_gains(self, seq: TokenTypeSequence, dtype=torch.float32) -> torch.Tensor:
        g = self.gamma
        return torch.tensor([g.get(t, 1.0) for t in seq.tags], dtype=dtype)

    def transform(self, X, seq: TokenTypeSequence | None = None):
        if seq is None:
            raise ValueError("transform needs the TokenTypeSequence of X")
        if torch.is_tensor(X):
            return X * self.row_gains(seq, X.dtype)[:, None]
        return np.asarray(X) * self.row_gains(seq, torch.float64).numpy()[:, None]

    def check_fitted(self):
        if not self.calibrated:
            raise NotFittedError("PreScaler has not been calibrated")

    def state(self) -> dict:
        return {
            "target_rms": self.target_rms,
            "types": list(self.types),
            "gamma": dict(self.gamma_) if self.calibrated else None,
        }

    @classmethod
    def from_state(cls, state: dict) -> "PreScaler":
        ps = cls(target_rms=state["target_rms"], types=tuple(state["types"]))
        if state.get("gamma") is not None:
            ps.gamma_ = {k: float(v) for k, v in state["gamma"].items()}
        return ps


def calibrate_prescaler(ps: PreScaler, batches) -> PreScaler:
    return ps.fit(batches)


def apply_prescaler(ps: PreScaler, X, seq: TokenTypeSequence):
    return ps.transform(X, seq)
