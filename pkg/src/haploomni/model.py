"""Model assembly: embeddings, the three decoder stacks, connectors, heads.

Sequence layouts::

    understanding  [BOS, BOI, vision patches..., EOI, text...]
    generation     [BOS, condition text (padded), TS, BON, noise patches..., EON]
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
from torch import nn

from .adaln import AdaLNLayer, TimeEmbedding, sinusoidal
from .block import BlockConfig, HaploBlock, KVCache
from .connectors import Connector, PreScaler
from .language import VOCAB
from .masking import AttentionMask, TokenType, TokenTypeSequence, build_mask
from .numeric import LN_EPS, layer_norm

T_, V_, S_, N_ = TokenType.TEXT, TokenType.VISION, TokenType.TIMESTEP, TokenType.NOISE


class PlanError(ValueError):
    """A sequence plan violates the expected layout."""


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    heads: int = 4
    d_ff: int = 256
    d_t: int = 64
    n_pre: int = 2
    n_base: int = 4
    n_post: int = 2
    vocab_size: int = VOCAB.size
    image_size: int = 16
    channels: int = 3
    patch_size: int = 4
    frames: int = 1
    adaln_groups: int = 2
    cond_len: int = 24
    text_len: int = 24
    ln_eps: float = LN_EPS
    rope: bool = True
    adaln_init_std: float = 0.02

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size={self.image_size} is not divisible by patch_size={self.patch_size}"
            )
        for name in ("n_pre", "n_base", "n_post", "adaln_groups", "frames", "heads", "d", "d_t"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.vocab_size < VOCAB.size:
            raise ValueError(f"vocab_size must be at least {VOCAB.size}")
        BlockConfig(self.d, self.heads, self.d_ff, self.rope)

    @property
    def block(self) -> BlockConfig:
        return BlockConfig(self.d, self.heads, self.d_ff, self.rope)

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def d_lat(self) -> int:
        return self.channels * self.patch_size**2

    @property
    def n_patches(self) -> int:
        return self.frames * self.grid**2

    def to_dict(self) -> dict:
        return asdict(self)


def expected_parameter_count(cfg: ModelConfig) -> int:
    d, d_t, d_ff, V, d_lat = cfg.d, cfg.d_t, cfg.d_ff, cfg.vocab_size, cfg.d_lat
    adaln = d_t * 6 * d + d * 2
    block = 4 * d * d + 2 * d * d_ff

    def stack(n, null):
        return min(cfg.adaln_groups, n) * 2 * adaln + n * block + (d_t if null else 0)

    embed = V * d + 2 * d_lat * d + d_t * d
    connectors = 2 * (d * d + 2 * d)
    heads = d * V + d * d_lat
    return (embed + stack(cfg.n_pre, True) + stack(cfg.n_base, True)
            + stack(cfg.n_post, False) + connectors + heads)


# ---------------------------------------------------------------- patches


def patchify(pixels: torch.Tensor, patch: int) -> torch.Tensor:
    """``[frames, C, H, W]`` -> ``[frames * (H/p) * (W/p), C * p * p]`` (frame-major, raster)."""
    if pixels.dim() == 3:
        pixels = pixels[None]
    F, C, H, W = pixels.shape
    if H % patch or W % patch:
        raise ValueError(f"image {H}x{W} is not divisible by patch size {patch}")
    x = pixels.reshape(F, C, H // patch, patch, W // patch, patch)
    x = x.permute(0, 2, 4, 1, 3, 5)
    return x.reshape(F * (H // patch) * (W // patch), C * patch * patch)


def unpatchify(tokens: torch.Tensor, patch: int, frames: int, channels: int, size: int) -> torch.Tensor:
    g = size // patch
    x = tokens.reshape(frames, g, g, channels, patch, patch)
    x = x.permute(0, 3, 1, 4, 2, 5)
    return x.reshape(frames, channels, size, size)


# ------------------------------------------------------------------ plans


def _positions(tags: TokenTypeSequence, n_patches: int, grid: int) -> torch.Tensor:
    pos = torch.arange(len(tags), dtype=torch.long)[:, None].repeat(1, 2)
    for kind, start, stop in tags.spans():
        if kind.bidirectional and stop - start == n_patches:
            j = torch.arange(stop - start)
            frame, rem = j // (grid * grid), j % (grid * grid)
            pos[start:stop, 0] = start + frame * grid + rem // grid
            pos[start:stop, 1] = start + rem % grid
    return pos


@dataclass
class SequencePlan:
    """A batch of identically laid out sequences.

    ``token_ids``/``targets``/``loss_mask`` are ``[B, L]``; ``targets[b, i]`` is
    the token that position ``i`` should predict and ``loss_mask`` marks the
    positions whose prediction is scored. ``patches`` holds vision patches for
    the understanding layout.
    """

    mode: str
    tags: TokenTypeSequence
    token_ids: torch.Tensor
    targets: torch.Tensor
    loss_mask: torch.Tensor
    patches: torch.Tensor | None = None
    n_patches: int = 0
    grid: int = 1
    positions: torch.Tensor = field(init=False)

    def __post_init__(self):
        self.positions = _positions(self.tags, self.n_patches, self.grid)

    @property
    def batch_size(self) -> int:
        return self.token_ids.shape[0]

    def __len__(self) -> int:
        return len(self.tags)

    def idx(self, kind: TokenType) -> torch.Tensor:
        return torch.from_numpy(self.tags.positions_of(kind))

    @property
    def n_noise(self) -> int:
        return int(len(self.tags.positions_of(N_)))

    @property
    def roles(self) -> list[str]:
        lm = self.loss_mask.any(dim=0)
        out = []
        for i, t in enumerate(self.tags.tags):
            if t is N_:
                out.append("noise-target")
            elif t is T_ and bool(lm[i]):
                out.append("ntp-target")
            else:
                out.append("none")
        return out

    def mask(self) -> AttentionMask:
        return build_mask(self.tags)

    def append_text(self, token: int) -> "SequencePlan":
        B = self.batch_size
        col = torch.full((B, 1), int(token), dtype=torch.long)
        pad = torch.full((B, 1), VOCAB.PAD, dtype=torch.long)
        return SequencePlan(
            mode=self.mode,
            tags=self.tags.append(T_),
            token_ids=torch.cat([self.token_ids, col], 1),
            targets=torch.cat([self.targets, pad], 1),
            loss_mask=torch.cat([self.loss_mask, torch.zeros(B, 1, dtype=torch.bool)], 1),
            patches=self.patches,
            n_patches=self.n_patches,
            grid=self.grid,
        )

    def to_trace(self) -> dict:
        return {
            "mode": self.mode,
            "tags": str(self.tags),
            "token_ids": self.token_ids.tolist(),
            "targets": self.targets.tolist(),
            "loss_mask": self.loss_mask.tolist(),
            "patches": None if self.patches is None else self.patches.tolist(),
            "patch_dtype": None if self.patches is None else str(self.patches.dtype).replace("torch.", ""),
            "n_patches": self.n_patches,
            "grid": self.grid,
        }

    @classmethod
    def from_trace(cls, trace: dict) -> "SequencePlan":
        patches = None
        if trace["patches"] is not None:
            patches = torch.tensor(trace["patches"], dtype=getattr(torch, trace["patch_dtype"]))
        return cls(
            mode=trace["mode"],
            tags=TokenTypeSequence.of(trace["tags"]),
            token_ids=torch.tensor(trace["token_ids"], dtype=torch.long),
            targets=torch.tensor(trace["targets"], dtype=torch.long),
            loss_mask=torch.tensor(trace["loss_mask"], dtype=torch.bool),
            patches=patches,
            n_patches=trace["n_patches"],
            grid=trace["grid"],
        )

    def validate(self, n_patches: int | None = None) -> None:
        s = str(self.tags)
        ids = self.token_ids
        if self.mode == "understanding":
            if "N" in s or "S" in s:
                raise PlanError("understanding plans carry no noise or timestep tokens")
            if not bool((ids[:, 0] == VOCAB.BOS).all()):
                raise PlanError("understanding plan must start with BOS")
            if "V" in s:
                n = s.count("V")
                if not s.startswith("TT" + "V" * n + "T") or s.count("V") != len(s.strip("T")):
                    raise PlanError(f"expected [BOS, BOI, vision..., EOI, text...], got {s}")
                if not bool((ids[:, 1] == VOCAB.BOI).all()) or not bool((ids[:, 2 + n] == VOCAB.EOI).all()):
                    raise PlanError("vision span must be delimited by BOI/EOI")
                if n_patches is not None and n != n_patches:
                    raise PlanError(f"expected {n_patches} vision patches, got {n}")
                if self.patches is None or self.patches.shape[-2] != n:
                    raise PlanError("vision patch tensor missing or misshapen")
        elif self.mode == "generation":
            n = s.count("N")
            i = s.find("S")
            expect = "T" * i + "S" + "T" + "N" * n + "T"
            if i < 1 or s != expect:
                raise PlanError(f"expected [BOS, text..., TS, BON, noise..., EON], got {s}")
            if n_patches is not None and n != n_patches:
                raise PlanError(f"expected {n_patches} noise patches, got {n}")
            if not bool((ids[:, 0] == VOCAB.BOS).all()) or not bool((ids[:, i] == VOCAB.TS).all()):
                raise PlanError("generation plan must start with BOS and place TS after the condition")
        else:
            raise PlanError(f"unknown plan mode {self.mode!r}")


def understanding_plan(cfg: ModelConfig, patches: torch.Tensor | None, prompt=b"",
                       answers: list | None = None) -> SequencePlan:
    """Build an understanding plan.

    ``patches`` is ``[n, d_lat]`` or ``[B, n, d_lat]`` (or None for text only).
    With ``answers`` (one byte string per sample) the text section is padded to
    ``cfg.text_len`` and each answer plus EOS becomes an NTP target.
    """
    prompt_ids = VOCAB.encode(prompt)
    if patches is not None and patches.dim() == 2:
        patches = patches[None]
    B = 1 if patches is None else patches.shape[0]
    if answers is not None and len(answers) != B:
        raise PlanError("one answer per sample is required")
    head = [VOCAB.BOS]
    tags = [T_]
    n = 0
    if patches is not None:
        n = patches.shape[1]
        head += [VOCAB.BOI] + [VOCAB.PAD] * n + [VOCAB.EOI]
        tags += [T_] + [V_] * n + [T_]
    start = len(head) + len(prompt_ids)  # first answer token position
    rows, tgts, lms = [], [], []
    for b in range(B):
        ids = head + prompt_ids
        text = [] if answers is None else VOCAB.encode(answers[b]) + [VOCAB.EOS]
        body = ids + text
        if answers is not None:
            width = len(head) + max(cfg.text_len, len(prompt_ids) + len(text))
            body = body + [VOCAB.PAD] * (width - len(body))
        tgt = body[1:] + [VOCAB.PAD]
        lm = [False] * len(body)
        for i in range(start - 1, start - 1 + len(text)):
            lm[i] = True
        rows.append(body)
        tgts.append(tgt)
        lms.append(lm)
    L = max(len(r) for r in rows)
    if any(len(r) != L for r in rows):
        raise PlanError("ragged understanding batch")
    tags += [T_] * (L - len(tags))
    plan = SequencePlan(
        mode="understanding",
        tags=TokenTypeSequence(tuple(tags)),
        token_ids=torch.tensor(rows, dtype=torch.long),
        targets=torch.tensor(tgts, dtype=torch.long),
        loss_mask=torch.tensor(lms, dtype=torch.bool),
        patches=patches,
        n_patches=n,
        grid=cfg.grid,
    )
    return plan


def generation_plan(cfg: ModelConfig, conditions: list) -> SequencePlan:
    """``[BOS, cond (padded to cond_len), TS, BON, noise x n_patches, EON]`` per condition."""
    n = cfg.n_patches
    rows = []
    for c in conditions:
        ids = VOCAB.encode(c)[: cfg.cond_len]
        ids = ids + [VOCAB.PAD] * (cfg.cond_len - len(ids))
        rows.append([VOCAB.BOS] + ids + [VOCAB.TS, VOCAB.BON] + [VOCAB.PAD] * n + [VOCAB.EON])
    tags = [T_] * (1 + cfg.cond_len) + [S_, T_] + [N_] * n + [T_]
    ids = torch.tensor(rows, dtype=torch.long)
    return SequencePlan(
        mode="generation",
        tags=TokenTypeSequence(tuple(tags)),
        token_ids=ids,
        targets=torch.full_like(ids, VOCAB.PAD),
        loss_mask=torch.zeros(ids.shape, dtype=torch.bool),
        n_patches=n,
        grid=cfg.grid,
    )


# ----------------------------------------------------------------- modules


class AdaLNPair(nn.Module):
    def __init__(self, d, d_t, eps, std):
        super().__init__()
        self.attn = AdaLNLayer(d, d_t, eps, std)
        self.ffn = AdaLNLayer(d, d_t, eps, std)


class DecoderStack(nn.Module):
    """A run of HaploOmni blocks cycling through ``adaln_groups`` shared AdaLN pairs."""

    def __init__(self, cfg: ModelConfig, n_blocks: int, null_embedding: bool):
        super().__init__()
        groups = min(cfg.adaln_groups, n_blocks)
        self.adaln = nn.ModuleList(
            AdaLNPair(cfg.d, cfg.d_t, cfg.ln_eps, cfg.adaln_init_std) for _ in range(groups)
        )
        self.blocks = nn.ModuleList(
            HaploBlock(cfg.block, self.adaln[i % groups].attn, self.adaln[i % groups].ffn)
            for i in range(n_blocks)
        )
        if null_embedding:
            self.null_theta = nn.Parameter(torch.randn(cfg.d_t) * 0.5)
        else:
            self.null_theta = None

    def null_embedding(self) -> TimeEmbedding:
        if self.null_theta is None:
            raise RuntimeError("this stack has no null time embedding")
        return TimeEmbedding(theta=self.null_theta, null_flag=True)

    def forward(self, h, mask, emb: TimeEmbedding | None = None, positions=None,
                cache: KVCache | None = None, layer_offset: int = 0):
        emb = self.null_embedding() if emb is None else emb
        for i, blk in enumerate(self.blocks):
            h = blk(h, mask, emb, positions=positions, cache=cache, layer_idx=layer_offset + i)
        return h


class Embeddings(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.text = nn.Parameter(torch.randn(cfg.vocab_size, cfg.d))
        self.vision_proj = nn.Parameter(torch.randn(cfg.d_lat, cfg.d) / math.sqrt(cfg.d_lat))
        self.noise_proj = nn.Parameter(torch.randn(cfg.d_lat, cfg.d) / math.sqrt(cfg.d_lat))
        self.time_proj = nn.Parameter(torch.randn(cfg.d_t, cfg.d) / math.sqrt(cfg.d_t))


class ModelBundle(nn.Module):
    """The assembled model. ``seed`` fixes parameter initialisation."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = config or ModelConfig()
        self.config = cfg
        self.seed = seed
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            self.embed = Embeddings(cfg)
            self.pre_decoder = DecoderStack(cfg, cfg.n_pre, null_embedding=True)
            self.pre_connector = Connector(cfg.d, cfg.ln_eps)
            self.base_decoder = DecoderStack(cfg, cfg.n_base, null_embedding=True)
            self.post_connector = Connector(cfg.d, cfg.ln_eps)
            self.post_decoder = DecoderStack(cfg, cfg.n_post, null_embedding=False)
            self.text_head = nn.Parameter(torch.randn(cfg.d, cfg.vocab_size) / math.sqrt(cfg.d))
            self.noise_head = nn.Parameter(torch.randn(cfg.d, cfg.d_lat) / math.sqrt(cfg.d))
        finally:
            torch.random.set_rng_state(gen_state)
        target = float(self.embed.text.detach().double().pow(2).mean().sqrt())
        self.prescale_pre = PreScaler(target_rms=target, types=("T", "V", "S", "N"))
        self.prescale_post = PreScaler(target_rms=target, types=("T", "S", "N"))
        self.prescaling = True

    # -------------------------------------------------------------- helpers

    @property
    def dtype(self) -> torch.dtype:
        return self.embed.text.dtype

    def parameter_count(self, trainable_only: bool = False) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad or not trainable_only)

    def new_cache(self) -> KVCache:
        return KVCache(self.config.n_pre + self.config.n_base)

    def set_routing(self, mode: str) -> None:
        self.pre_connector.routing_mode = mode
        self.post_connector.routing_mode = mode

    def understanding_plan(self, visual, prompt=b"", answers=None) -> SequencePlan:
        if visual is not None:
            visual = visual.to(self.dtype)
        plan = understanding_plan(self.config, visual, prompt, answers)
        plan.validate(self.config.n_patches)
        return plan

    def generation_plan(self, conditions) -> SequencePlan:
        if isinstance(conditions, (str, bytes)):
            conditions = [conditions]
        return generation_plan(self.config, conditions)

    def time_embedding(self, t) -> TimeEmbedding:
        if isinstance(t, int) or (torch.is_tensor(t) and t.dim() == 0):
            t = int(t)
            return TimeEmbedding(theta=sinusoidal(t, self.config.d_t, dtype=self.dtype), t=t)
        return TimeEmbedding(theta=sinusoidal(torch.as_tensor(t), self.config.d_t, dtype=self.dtype))

    def _gains(self, ps: PreScaler, tags: TokenTypeSequence) -> torch.Tensor | None:
        if not self.prescaling or not ps.calibrated:
            return None
        return ps.row_gains(tags, self.dtype)[:, None]

    def prescale(self, which: str, h: torch.Tensor, tags: TokenTypeSequence) -> torch.Tensor:
        g = self._gains(self.prescale_pre if which == "pre" else self.prescale_post, tags)
        return h if g is None else h * g

    # ----------------------------------------------------------- embedding

    def embed_plan(self, plan: SequencePlan, x_t: torch.Tensor | None = None, t=None) -> torch.Tensor:
        B, L = plan.token_ids.shape
        E = self.embed
        parts, index = [], []
        ti = plan.idx(T_)
        if len(ti):
            parts.append(E.text[plan.token_ids[:, ti]])
            index.append(ti)
        vi = plan.idx(V_)
        if len(vi):
            parts.append(plan.patches.to(self.dtype) @ E.vision_proj)
            index.append(vi)
        si = plan.idx(S_)
        if len(si):
            if t is None:
                raise PlanError("a timestep token needs a timestep")
            theta = self.time_embedding(t).theta
            ts = (theta @ E.time_proj).reshape(-1, 1, self.config.d).expand(B, len(si), -1)
            parts.append(ts)
            index.append(si)
        ni = plan.idx(N_)
        if len(ni):
            if x_t is None:
                raise PlanError("noise positions need x_t")
            parts.append(x_t.to(self.dtype) @ E.noise_proj)
            index.append(ni)
        order = torch.argsort(torch.cat(index))
        return torch.cat(parts, dim=1)[:, order]

    # ------------------------------------------------------------ forwards

    def _trunk(self, plan: SequencePlan, h: torch.Tensor, mask: torch.Tensor, positions,
               cache: KVCache | None = None) -> torch.Tensor:
        h = self.pre_decoder(h, mask, positions=positions, cache=cache)
        h = self.pre_connector(h)
        return self.base_decoder(h, mask, positions=positions, cache=cache,
                                 layer_offset=self.config.n_pre)

    def text_logits(self, h: torch.Tensor) -> torch.Tensor:
        return layer_norm(h, self.config.ln_eps) @ self.text_head

    def forward_understanding(self, plan: SequencePlan) -> torch.Tensor:
        """Logits ``[B, n_text, V]`` at the plan's text positions."""
        plan.validate(self.config.n_patches)
        h = self.prescale("pre", self.embed_plan(plan), plan.tags)
        h = self._trunk(plan, h, plan.mask().as_tensor(), plan.positions)
        return self.text_logits(h[:, plan.idx(T_)])

    def understanding_logits_at_last(self, plan: SequencePlan, cache: KVCache | None = None,
                                     mask: AttentionMask | None = None) -> torch.Tensor:
        mask = plan.mask() if mask is None else mask
        h = self.prescale("pre", self.embed_plan(plan), plan.tags)
        h = self._trunk(plan, h, mask.as_tensor(), plan.positions, cache)
        return self.text_logits(h[0, -1])

    def understanding_step(self, plan: SequencePlan, cache: KVCache, mask: AttentionMask) -> torch.Tensor:
        """Process only the last (text) position of ``plan`` against ``cache``."""
        L = len(plan)
        if cache.length != L - 1:
            raise RuntimeError(f"cache holds {cache.length} tokens, plan has {L}")
        tok = plan.token_ids[:, -1:]
        h = self.embed.text[tok]
        if self._gains(self.prescale_pre, plan.tags) is not None:
            h = h * self.prescale_pre.gamma[T_]
        rows = mask.as_tensor(slice(L - 1, L))
        h = self._trunk(plan, h, rows, plan.positions[L - 1:], cache)
        return self.text_logits(h[0, -1])

    def forward_generation(self, plan: SequencePlan, x_t: torch.Tensor, t) -> torch.Tensor:
        """Noise estimate ``[B, n_noise, d_lat]`` for noised latents ``x_t``."""
        plan.validate(self.config.n_patches)
        squeeze = x_t.dim() == 2
        if squeeze:
            x_t = x_t[None]
        if x_t.shape[1] != plan.n_noise:
            raise PlanError(f"x_t has {x_t.shape[1]} patches, plan expects {plan.n_noise}")
        if plan.batch_size != x_t.shape[0]:
            if plan.batch_size != 1:
                raise PlanError("plan and x_t batch sizes disagree")
            plan = replace(plan, token_ids=plan.token_ids.expand(x_t.shape[0], -1),
                           targets=plan.targets.expand(x_t.shape[0], -1),
                           loss_mask=plan.loss_mask.expand(x_t.shape[0], -1))
        mask = plan.mask().as_tensor()
        h = self.prescale("pre", self.embed_plan(plan, x_t, t), plan.tags)
        h = self._trunk(plan, h, mask, plan.positions)
        h = self.post_connector(h)
        h = self.prescale("post", h, plan.tags)
        h = self.post_decoder(h, mask, self.time_embedding(t), positions=plan.positions)
        out = self.noise_output(h[:, plan.idx(N_)])
        return out[0] if squeeze else out

    def noise_output(self, h: torch.Tensor) -> torch.Tensor:
        return h @ self.noise_head

    # --------------------------------------------------- warmup sub-paths

    def pre_decoder_only(self, plan: SequencePlan) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (pre-decoder input, pre-decoder output) for warmup."""
        h0 = self.prescale("pre", self.embed_plan(plan), plan.tags)
        return h0, self.pre_decoder(h0, plan.mask().as_tensor(), positions=plan.positions)

    def post_decoder_only(self, plan: SequencePlan, x_t, t) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (post-decoder input, post-decoder output) with raw embeddings as input."""
        h0 = self.prescale("pre", self.embed_plan(plan, x_t, t), plan.tags)
        out = self.post_decoder(h0, plan.mask().as_tensor(), self.time_embedding(t),
                                positions=plan.positions)
        return h0, out

    def metadata(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "seed": self.seed,
            "ln_eps": self.config.ln_eps,
            "prescaling": self.prescaling,
            "prescale_pre": self.prescale_pre.state(),
            "prescale_post": self.prescale_post.state(),
            "routing": self.pre_connector.routing_mode,
        }


def forward_understanding(bundle: ModelBundle, plan: SequencePlan) -> torch.Tensor:
    return bundle.forward_understanding(plan)


def forward_generation(bundle: ModelBundle, plan: SequencePlan, x_t, t) -> torch.Tensor:
    return bundle.forward_generation(plan, x_t, t)


def image_to_latent(pixels_uint8: np.ndarray) -> torch.Tensor:
    """``[frames, H, W, C]`` uint8 -> ``[frames, C, H, W]`` floats in [-1, 1]."""
    arr = np.asarray(pixels_uint8, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(arr / 127.5 - 1.0).permute(0, 3, 1, 2).float()


def latent_to_image(x: torch.Tensor) -> np.ndarray:
    """Inverse of :func:`image_to_latent`, clipped and rounded to uint8."""
    arr = ((x.detach().double().clamp(-1, 1) + 1.0) * 127.5).round()
    return arr.permute(0, 2, 3, 1).numpy().astype(np.uint8)
