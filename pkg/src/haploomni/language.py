"""Byte-level vocabulary, next-token objective and autoregressive decoding."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .block import KVCache  # noqa: F401  (re-exported)
from .masking import TokenType, extend_mask_for_decoding


class DegenerateBatchError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    n_bytes: int = 256
    specials: tuple[str, ...] = ("BOS", "EOS", "PAD", "BOI", "EOI", "BON", "EON", "TS")

    def __post_init__(self):
        if len(set(self.specials)) != len(self.specials):
            raise ValueError("special tokens must be distinct")

    @property
    def size(self) -> int:
        return self.n_bytes + len(self.specials)

    def __getattr__(self, name):
        specials = object.__getattribute__(self, "specials")
        if name in specials:
            return object.__getattribute__(self, "n_bytes") + specials.index(name)
        raise AttributeError(name)

    def encode(self, text: str | bytes) -> list[int]:
        data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        return list(data)

    def decode(self, ids) -> str:
        return bytes(i for i in ids if i < self.n_bytes).decode("utf-8", errors="replace")


VOCAB = Vocabulary()


def ntp_loss(logits: torch.Tensor, targets: torch.Tensor, loss_mask: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over positions where ``loss_mask`` is set.

    ``logits[..., i, :]`` scores ``targets[..., i]`` (targets already shifted).
    """
    loss_mask = loss_mask.bool()
    if not bool(loss_mask.any()):
        raise DegenerateBatchError("loss mask selects no positions")
    logp = torch.log_softmax(logits, dim=-1)
    safe = torch.where(loss_mask, targets, torch.zeros_like(targets))
    nll = -logp.gather(-1, safe[..., None].long())[..., 0]
    return (nll * loss_mask).sum() / loss_mask.sum()


def top_p_filter(probs: torch.Tensor, top_p: float) -> torch.Tensor:
    """Keep the smallest high-probability prefix with mass >= ``top_p`` and renormalise.

    Ties are ordered by ascending token id. At least one token always survives.
    """
    if not 0 < top_p <= 1:
        raise ValueError(f"top_p must lie in (0, 1], got {top_p}")
    # stable sort on descending probability keeps ascending id among ties
    order = torch.sort(-probs, dim=-1, stable=True).indices
    sorted_p = probs.gather(-1, order)
    cum = sorted_p.cumsum(-1)
    keep_sorted = (cum - sorted_p) < top_p
    keep_sorted[..., 0] = True
    keep = torch.zeros_like(keep_sorted).scatter(-1, order, keep_sorted)
    out = torch.where(keep, probs, torch.zeros_like(probs))
    return out / out.sum(-1, keepdim=True)


def sample_next(logits: torch.Tensor, temperature: float, top_p: float, rng: torch.Generator | None) -> int:
    if temperature < 0:
        raise ValueError(f"temperature must be >= 0, got {temperature}")
    if not 0 < top_p <= 1:
        raise ValueError(f"top_p must lie in (0, 1], got {top_p}")
    logits = logits.double()
    if temperature == 0:
        return int(torch.argmax(logits).item())
    probs = torch.softmax(logits / temperature, dim=-1)
    probs = top_p_filter(probs, top_p)
    return int(torch.multinomial(probs, 1, generator=rng).item())


def decode(model, visual, prompt: str | bytes = b"", max_new: int = 32, temperature: float = 0.0,
           top_p: float = 1.0, rng: torch.Generator | None = None, use_cache: bool = True,
           stop_at_eos: bool = True) -> list[int]:
    """Generate text conditioned on ``visual`` patches (``[n_patches, d_lat]`` or None).

    With ``use_cache`` the prompt is processed once and every new token extends
    the per-layer KV cache; otherwise the full sequence is recomputed per step.
    """
    if temperature < 0 or not 0 < top_p <= 1:
        raise ValueError(f"invalid sampling knobs: temperature={temperature}, top_p={top_p}")
    plan = model.understanding_plan(visual, prompt)
    out: list[int] = []
    with torch.no_grad():
        if use_cache:
            cache = model.new_cache()
            mask = plan.mask()
            logits = model.understanding_logits_at_last(plan, cache=cache, mask=mask)
            for _ in range(max_new):
                nxt = sample_next(logits, temperature, top_p, rng)
                out.append(nxt)
                if stop_at_eos and nxt == VOCAB.EOS:
                    break
                mask = extend_mask_for_decoding(mask, TokenType.TEXT)
                plan = plan.append_text(nxt)
                logits = model.understanding_step(plan, cache=cache, mask=mask)
        else:
            for _ in range(max_new):
                logits = model.understanding_logits_at_last(plan)
                nxt = sample_next(logits, temperature, top_p, rng)
                out.append(nxt)
                if stop_at_eos and nxt == VOCAB.EOS:
                    break
                plan = plan.append_text(nxt)
    return out
