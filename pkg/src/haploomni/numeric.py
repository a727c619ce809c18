"""Tensor primitives, parameter bookkeeping and the finite-difference gradient oracle.

Reverse-mode differentiation is delegated to :mod:`torch.autograd`; everything in
this module is a thin, shape-checked layer over it so the rest of the package
speaks one vocabulary. The finite-difference oracle never touches autograd for
its numerical side: it perturbs parameter storage in place and re-evaluates the
scalar objective.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
import torch

LN_EPS = 1e-5
TRAIN_DTYPE = torch.float32
CHECK_DTYPE = torch.float64


class DimensionError(ValueError):
    """Raised when tensor extents do not line up."""


class OracleFailure(RuntimeError):
    """Raised when the finite-difference objective produces a non-finite value."""


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise DimensionError(
            f"matmul: inner extents disagree, {tuple(a.shape)} x {tuple(b.shape)}"
        )
    return a @ b


def layer_norm(x: torch.Tensor, eps: float = LN_EPS) -> torch.Tensor:
    # no affine: modulation comes from AdaLN
    mu = x.mean(dim=-1, keepdim=True)
    var = (x - mu).pow(2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps)


def silu(x: torch.Tensor) -> torch.Tensor:
    return x * torch.sigmoid(x)


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    z = x - x.max(dim=axis, keepdim=True).values.detach()
    e = torch.exp(z)
    return e / e.sum(dim=axis, keepdim=True)


def make_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def seed_everything(seed: int) -> None:
    torch.manual_seed(int(seed))
    np.random.seed(int(seed) % (2**32))
    torch.use_deterministic_algorithms(True)


def tensor_digest(t: torch.Tensor) -> str:
    """SHA-256 of a tensor's raw bytes (dtype and shape included)."""
    arr = t.detach().cpu().contiguous().numpy()
    h = hashlib.sha256()
    h.update(str(arr.dtype).encode())
    h.update(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def parameter_digests(module: torch.nn.Module) -> dict[str, str]:
    return {name: tensor_digest(p) for name, p in module.named_parameters()}


@dataclass
class GradCheckReport:
    """Per-parameter comparison between autograd and central differences."""

    rel_errors: dict[str, float] = field(default_factory=dict)
    frozen: list[str] = field(default_factory=list)
    checked_entries: int = 0
    tol: float = 1e-4

    @property
    def max_rel_error(self) -> float:
        return max(self.rel_errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def worst(self) -> tuple[str, float]:
        if not self.rel_errors:
            return ("", 0.0)
        name = max(self.rel_errors, key=self.rel_errors.__getitem__)
        return name, self.rel_errors[name]


def _as_named(params) -> list[tuple[str, torch.Tensor]]:
    if isinstance(params, Mapping):
        return list(params.items())
    if isinstance(params, torch.nn.Module):
        return list(params.named_parameters())
    return [(str(i), p) if not isinstance(p, tuple) else p for i, p in enumerate(params)]


def finite_difference_check(
    f: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor] | torch.nn.Module | Iterable,
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare reverse-mode gradients of the scalar ``f()`` with central differences.

    ``max_entries`` caps the number of coordinates probed per parameter (sampled
    with a fixed seed). The relative error of a parameter is
    ``max|g_auto - g_fd| / max(max|g_auto|, max|g_fd|, floor)`` over the probed
    coordinates. Parameters with ``requires_grad=False`` are listed as frozen and
    their reverse-mode gradient must be absent.
    """
    named = _as_named(params)
    for _, p in named:
        p.grad = None
    loss = f()
    if not torch.isfinite(loss).all():
        raise OracleFailure(f"objective is not finite: {loss.item()!r}")
    loss.backward()
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for name, p in named:
        if not p.requires_grad:
            if p.grad is not None and bool(torch.any(p.grad != 0)):
                report.rel_errors[name] = math.inf
            report.frozen.append(name)
            continue
        auto = p.grad.detach().reshape(-1).clone() if p.grad is not None else torch.zeros(p.numel(), dtype=p.dtype)
        n = p.numel()
        idx = np.arange(n)
        if max_entries is not None and n > max_entries:
            idx = np.sort(rng.choice(n, size=max_entries, replace=False))
        flat = p.data.view(-1)
        num = torch.empty(len(idx), dtype=torch.float64)
        with torch.no_grad():
            for j, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise OracleFailure(f"objective not finite while probing {name}[{i}]")
                num[j] = (fp - fm) / (2 * h)
        a = auto[torch.as_tensor(idx)].to(torch.float64)
        scale = max(a.abs().max().item(), num.abs().max().item(), floor)
        report.rel_errors[name] = (a - num).abs().max().item() / scale
        report.checked_entries += len(idx)
    for _, p in named:
        p.grad = None
    return report
