"""Three-stage training: multimodal warmup, connector alignment, unified tuning."""
from __future__ import annotations

import csv
import fnmatch
import io
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .adaln import sinusoidal
from .checkpoint import save_checkpoint
from .data import PairDataset
from .diffusion import NoiseSchedule, diffusion_loss, forward_noise
from .language import ntp_loss
from .masking import TokenType
from .model import ModelBundle, ModelConfig
from .numeric import parameter_digests

log = logging.getLogger(__name__)

STAGES = ("warmup-pre", "warmup-post", "align-1", "align-2", "align-3", "unified")
PREREQUISITES = {
    "warmup-pre": (),
    "warmup-post": (),
    "align-1": ("warmup-pre", "warmup-post"),
    "align-2": ("warmup-pre", "warmup-post", "align-1"),
    "align-3": ("warmup-pre", "warmup-post", "align-1", "align-2"),
    "unified": STAGES[:-1],
}
METRIC_FIELDS = ("stage", "step", "loss_total", "loss_ntp", "loss_diff", "loss_id", "loss_distill", "lr", "seed")
GRAD_CLIP = 1.0


class SequencingError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, stage: str, step: int, value: float):
        super().__init__(f"{stage}: non-finite loss {value!r} at step {step}")
        self.step = step


@dataclass(frozen=True)
class StagePlan:
    stage: str
    trainable: tuple[str, ...]
    losses: tuple[tuple[str, float], ...]
    lr: float
    batch_size: int = 8
    steps: int = 100
    warmup_steps: int = 0
    relax_after: int | None = None
    relax_trainable: tuple[str, ...] = ()
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")

    @property
    def loss_weights(self) -> dict[str, float]:
        return dict(self.losses)

    def trainable_names(self, names, step: int | None = None) -> list[str]:
        pats = list(self.trainable)
        if self.relax_after is not None and (step is None or step > self.relax_after):
            pats += list(self.relax_trainable)
        return [n for n in names if any(fnmatch.fnmatchcase(n, p) for p in pats)]

    def header(self) -> dict:
        return {
            "stage": self.stage,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "steps": self.steps,
            "warmup_steps": self.warmup_steps,
            "trainable": ",".join(self.trainable),
            "relax_after": self.relax_after,
            "relax_trainable": ",".join(self.relax_trainable),
            "losses": ",".join(f"{k}:{v}" for k, v in self.losses),
        }


DEFAULT_PLANS = {
    "warmup-pre": StagePlan(
        "warmup-pre", ("pre_decoder.*", "embed.vision_proj"),
        (("id", 1.0), ("distill", 1.0)), lr=1e-4, steps=500),
    "warmup-post": StagePlan(
        "warmup-post", ("post_decoder.*", "embed.noise_proj", "embed.time_proj", "noise_head"),
        (("id", 1.0), ("distill", 1.0)), lr=2e-4, steps=500),
    "align-1": StagePlan(
        "align-1", ("pre_connector.*",), (("ntp", 1.0),), lr=1e-5, steps=300, warmup_steps=20),
    "align-2": StagePlan(
        "align-2", ("post_connector.*",), (("diff", 1.0),), lr=1e-4, steps=300,
        relax_after=100, relax_trainable=("post_decoder.*",)),
    "align-3": StagePlan(
        "align-3", ("pre_connector.*", "post_connector.*", "post_decoder.*"),
        (("ntp", 1.0), ("diff", 1.0)), lr=1e-4, steps=300),
    "unified": StagePlan("unified", ("*",), (("ntp", 1.0), ("diff", 1.0)), lr=2e-5, steps=1000),
}


def default_plan(stage: str, **overrides) -> StagePlan:
    return replace(DEFAULT_PLANS[stage], **overrides)


# ----------------------------------------------------------------- teachers


class PreTeacher(nn.Module):
    """Frozen per-patch feature producer standing in for a pretrained vision encoder."""

    def __init__(self, d_lat: int, d: int, seed: int = 1234):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.A = nn.Parameter(torch.randn(d_lat, d, generator=g) / math.sqrt(d_lat), requires_grad=False)
        self.B = nn.Parameter(torch.randn(d, d, generator=g) / math.sqrt(d), requires_grad=False)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        return torch.tanh(patches.to(self.A.dtype) @ self.A) @ self.B


class PostTeacher(nn.Module):
    """Frozen noise predictor standing in for a pretrained video diffusion model."""

    def __init__(self, d_lat: int, d: int, d_t: int, seed: int = 4321):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.d_t = d_t
        self.A = nn.Parameter(torch.randn(d_lat, d, generator=g) / math.sqrt(d_lat), requires_grad=False)
        self.C = nn.Parameter(torch.randn(d_t, d, generator=g) / math.sqrt(d_t), requires_grad=False)
        self.B = nn.Parameter(torch.randn(d, d_lat, generator=g) / math.sqrt(d), requires_grad=False)

    def forward(self, x_t: torch.Tensor, t) -> torch.Tensor:
        theta = sinusoidal(torch.as_tensor(t), self.d_t, dtype=self.A.dtype)
        if theta.dim() == 2:
            theta = theta[:, None]
        return torch.tanh(x_t.to(self.A.dtype) @ self.A + theta @ self.C) @ self.B


@dataclass
class TeacherBundle:
    pre: PreTeacher
    post: PostTeacher

    @classmethod
    def build(cls, cfg: ModelConfig, seed: int = 1234) -> "TeacherBundle":
        return cls(PreTeacher(cfg.d_lat, cfg.d, seed), PostTeacher(cfg.d_lat, cfg.d, cfg.d_t, seed + 1))

    def to(self, dtype) -> "TeacherBundle":
        self.pre.to(dtype)
        self.post.to(dtype)
        return self


# ------------------------------------------------------------------- losses


def identity_loss(outputs: torch.Tensor, inputs: torch.Tensor) -> torch.Tensor:
    if outputs.shape != inputs.shape:
        raise ValueError(f"shape mismatch: {tuple(outputs.shape)} vs {tuple(inputs.shape)}")
    return (outputs - inputs).pow(2).mean()


def distillation_loss(student: torch.Tensor, teacher: torch.Tensor) -> torch.Tensor:
    if student.shape != teacher.shape:
        raise ValueError(f"shape mismatch: {tuple(student.shape)} vs {tuple(teacher.shape)}")
    return (student - teacher.detach()).pow(2).mean()


def optimizer_step(params, grads=None, state: torch.optim.AdamW | None = None, lr: float = 1e-4,
                   betas=(0.9, 0.999), weight_decay: float = 0.0) -> torch.optim.AdamW:
    """One AdamW update (bias-corrected moments, decoupled weight decay).

    ``state`` is the optimizer returned by a previous call; ``grads`` when
    given are written into ``.grad`` first.
    """
    params = list(params)
    if grads is not None:
        for p, g in zip(params, grads):
            p.grad = None if g is None else g.detach().clone()
    if state is None:
        state = torch.optim.AdamW(params, lr=lr, betas=betas, weight_decay=weight_decay)
    for group in state.param_groups:
        group["lr"] = lr
        group["weight_decay"] = weight_decay
        group["betas"] = betas
    state.step()
    return state


# --------------------------------------------------------------- batching


class Batcher:
    """Deterministic sampler of understanding and generation mini-batches."""

    def __init__(self, data: PairDataset, cfg: ModelConfig, sched: NoiseSchedule, seed: int,
                 dtype=torch.float32):
        self.data = data
        self.cfg = cfg
        self.sched = sched
        self.rng = np.random.default_rng(seed)
        self.gen = torch.Generator().manual_seed(seed)
        self.und_lat = data.latents("und", cfg.patch_size).to(dtype)
        self.gen_lat = data.latents("gen", cfg.patch_size).to(dtype)
        self.dtype = dtype

    def _pick(self, n_total: int, k: int) -> np.ndarray:
        if n_total == 0:
            raise ValueError("dataset has no pairs of the requested kind")
        return self.rng.choice(n_total, size=k, replace=n_total < k)

    def understanding(self, bundle: ModelBundle, k: int):
        idx = self._pick(len(self.data.und_captions), k)
        caps = [self.data.und_captions[i] for i in idx]
        return bundle.understanding_plan(self.und_lat[idx], answers=caps)

    def generation(self, bundle: ModelBundle, k: int):
        idx = self._pick(len(self.data.gen_captions), k)
        caps = [self.data.gen_captions[i] for i in idx]
        plan = bundle.generation_plan(caps)
        x0 = self.gen_lat[idx]
        t = torch.randint(1, self.sched.T + 1, (k,), generator=self.gen)
        eps = torch.randn(x0.shape, generator=self.gen, dtype=self.dtype)
        return plan, forward_noise(self.sched, x0, t, eps=eps)


# ------------------------------------------------------------ calibration


def calibrate_bundle(bundle: ModelBundle, data: PairDataset, sched: NoiseSchedule, seed: int,
                     n_batches: int = 4, batch_size: int = 8) -> None:
    """Calibrate both pre-scalers on a fixed-seed stream of training batches."""
    b = Batcher(data, bundle.config, sched, seed + 7919, bundle.dtype)
    pre_stream, post_stream = [], []
    was = bundle.prescaling
    bundle.prescaling = False
    with torch.no_grad():
        for i in range(n_batches):
            if i % 2 == 0 and data.und_captions:
                plan = b.understanding(bundle, batch_size)
                pre_stream.append((bundle.embed_plan(plan), plan.tags))
            if data.gen_captions:
                plan, nb = b.generation(bundle, batch_size)
                h = bundle.embed_plan(plan, nb.x_t, nb.t)
                pre_stream.append((h, plan.tags))
    bundle.prescaling = was
    present = sorted({t.value for _, tags in pre_stream for t in tags.tags}, key="TVSN".index)
    bundle.prescale_pre.set_params(types=tuple(present)).fit(pre_stream)
    if data.gen_captions:
        with torch.no_grad():
            b2 = Batcher(data, bundle.config, sched, seed + 7919, bundle.dtype)
            for _ in range(n_batches):
                plan, nb = b2.generation(bundle, batch_size)
                h = bundle.prescale("pre", bundle.embed_plan(plan, nb.x_t, nb.t), plan.tags)
                h = bundle._trunk(plan, h, plan.mask().as_tensor(), plan.positions)
                post_stream.append((bundle.post_connector(h), plan.tags))
        bundle.prescale_post.fit(post_stream)


# --------------------------------------------------------------- run_stage


@dataclass
class StageResult:
    plan: StagePlan
    metrics: list[dict] = field(default_factory=list)
    frozen_before: dict[str, str] = field(default_factory=dict)
    frozen_after: dict[str, str] = field(default_factory=dict)
    checkpoint: Path | None = None
    csv_path: Path | None = None

    @property
    def frozen_unchanged(self) -> bool:
        return self.frozen_before == self.frozen_after

    def series(self, key: str) -> list[float]:
        return [m[key] for m in self.metrics if m[key] is not None]


def stage_losses(bundle: ModelBundle, plan: StagePlan, batcher: Batcher, teachers: TeacherBundle | None):
    """Compute the active losses of one step. Returns ``(total, parts)``."""
    w = plan.loss_weights
    parts: dict[str, torch.Tensor] = {}
    k = plan.batch_size
    if plan.stage == "warmup-pre":
        up = batcher.understanding(bundle, k)
        h0, out = bundle.pre_decoder_only(up)
        ti, vi = up.idx(TokenType.TEXT), up.idx(TokenType.VISION)
        if "id" in w:
            parts["id"] = identity_loss(out[:, ti], h0[:, ti].detach())
        if "distill" in w:
            parts["distill"] = distillation_loss(out[:, vi], teachers.pre(up.patches))
    elif plan.stage == "warmup-post":
        gp, nb = batcher.generation(bundle, k)
        h0, out = bundle.post_decoder_only(gp, nb.x_t, nb.t)
        ti, ni = gp.idx(TokenType.TEXT), gp.idx(TokenType.NOISE)
        if "id" in w:
            parts["id"] = identity_loss(out[:, ti], h0[:, ti].detach())
        if "distill" in w:
            parts["distill"] = distillation_loss(bundle.noise_output(out[:, ni]), teachers.post(nb.x_t, nb.t))
        if "diff" in w:
            parts["diff"] = diffusion_loss(bundle.noise_output(out[:, ni]), nb)
    else:
        if "ntp" in w:
            up = batcher.understanding(bundle, k)
            logits = bundle.forward_understanding(up)
            ti = up.idx(TokenType.TEXT)
            parts["ntp"] = ntp_loss(logits, up.targets[:, ti], up.loss_mask[:, ti])
        if "diff" in w:
            gp, nb = batcher.generation(bundle, k)
            parts["diff"] = diffusion_loss(bundle.forward_generation(gp, nb.x_t, nb.t), nb)
    total = sum(w[name] * v for name, v in parts.items())
    return total, parts


def _set_trainable(bundle: ModelBundle, names: set[str]):
    for n, p in bundle.named_parameters():
        p.requires_grad_(n in names)


def run_stage(plan: StagePlan, bundle: ModelBundle, data: PairDataset, teachers: TeacherBundle | None = None,
              seed: int = 0, sched: NoiseSchedule | None = None, out_dir=None, check_order: bool = True,
              calibrate: bool = True, log_every: int = 0) -> StageResult:
    """Train ``bundle`` in place for ``plan.steps`` optimizer steps."""
    sched = sched or NoiseSchedule()
    history = list(getattr(bundle, "extra_meta", {}).get("stages", []))
    if check_order:
        missing = [s for s in PREREQUISITES[plan.stage] if s not in history]
        if missing:
            raise SequencingError(f"{plan.stage} requires completed stages: {', '.join(missing)}")
    if teachers is None:
        teachers = TeacherBundle.build(bundle.config, seed=1234)
    teachers.to(bundle.dtype)
    if calibrate and bundle.prescaling and not bundle.prescale_pre.calibrated:
        calibrate_bundle(bundle, data, sched, seed)

    names = [n for n, _ in bundle.named_parameters()]
    ever_trainable = set(plan.trainable_names(names, step=None))
    frozen = [n for n in names if n not in ever_trainable]
    params = dict(bundle.named_parameters())
    before = {n: d for n, d in parameter_digests(bundle).items() if n in frozen}

    stage_seed = seed * 1000 + STAGES.index(plan.stage)
    batcher = Batcher(data, bundle.config, sched, stage_seed, bundle.dtype)
    active = set(plan.trainable_names(names, step=0))
    _set_trainable(bundle, active)
    opt = torch.optim.AdamW([params[n] for n in names if n in active], lr=plan.lr,
                            betas=plan.betas, weight_decay=plan.weight_decay)
    result = StageResult(plan=plan, frozen_before=before)
    bundle.train()
    try:
        for step in range(1, plan.steps + 1):
            now = set(plan.trainable_names(names, step=step))
            if now != active:
                added = [params[n] for n in names if n in now - active]
                _set_trainable(bundle, now)
                opt.add_param_group({"params": added})
                active = now
            lr = plan.lr * min(1.0, step / plan.warmup_steps) if plan.warmup_steps else plan.lr
            for g in opt.param_groups:
                g["lr"] = lr
            opt.zero_grad(set_to_none=True)
            total, parts = stage_losses(bundle, plan, batcher, teachers)
            value = float(total.detach())
            if not math.isfinite(value):
                raise DivergenceError(plan.stage, step, value)
            total.backward()
            torch.nn.utils.clip_grad_norm_([params[n] for n in names if n in active], GRAD_CLIP)
            opt.step()
            rec = {
                "stage": plan.stage, "step": step, "loss_total": value,
                "loss_ntp": _f(parts.get("ntp")), "loss_diff": _f(parts.get("diff")),
                "loss_id": _f(parts.get("id")), "loss_distill": _f(parts.get("distill")),
                "lr": lr, "seed": seed,
            }
            result.metrics.append(rec)
            if log_every and step % log_every == 0:
                log.info("%s step %d loss %.5f", plan.stage, step, value)
    finally:
        for p in bundle.parameters():
            p.requires_grad_(True)
            p.grad = None
        bundle.eval()
    result.frozen_after = {n: d for n, d in parameter_digests(bundle).items() if n in frozen}
    if not result.frozen_unchanged:
        changed = [n for n in frozen if before[n] != result.frozen_after[n]]
        raise RuntimeError(f"frozen parameters changed during {plan.stage}: {changed[:5]}")
    extra = dict(getattr(bundle, "extra_meta", {}) or {})
    extra["stages"] = history + [plan.stage]
    extra["seed"] = seed
    extra["schedule"] = sched.metadata()
    extra.setdefault("plans", {})[plan.stage] = plan.header()
    bundle.extra_meta = extra
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.csv_path = write_metrics(out / f"{plan.stage}.csv", plan, result.metrics)
        result.checkpoint = save_checkpoint(bundle, out / f"{plan.stage}.ckpt")
    return result


def _f(x):
    return None if x is None else float(x.detach())


def metrics_csv(plan: StagePlan, metrics: list[dict]) -> str:
    buf = io.StringIO()
    for k, v in plan.header().items():
        buf.write(f"# {k}={v}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for m in metrics:
        w.writerow(["" if m[k] is None else (repr(m[k]) if isinstance(m[k], float) else m[k])
                    for k in METRIC_FIELDS])
    return buf.getvalue()


def write_metrics(path, plan: StagePlan, metrics: list[dict]) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(metrics_csv(plan, metrics))
    return path


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        rows = [line for line in fh if not line.startswith("#")]
    out = []
    for r in csv.DictReader(rows):
        out.append({k: (None if v == "" else v) for k, v in r.items()})
    return out
