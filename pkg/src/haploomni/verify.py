"""Self-contained invariant suites behind ``haploomni verify``.

Each suite returns a list of :class:`Check` results; none of them needs data
on disk or a trained checkpoint.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np
import torch

from .adaln import AdaLNLayer, StateMatrix, TimeEmbedding, single_expert_adaln, sinusoidal
from .block import BlockConfig, HaploBlock
from .connectors import Connector
from .diffusion import NoiseSchedule, diffusion_loss, forward_noise, sample
from .language import VOCAB, decode, ntp_loss
from .masking import TokenType, TokenTypeSequence, build_mask, extend_mask_for_decoding
from .model import ModelBundle, ModelConfig
from .numeric import finite_difference_check

ALPHABET = (TokenType.TEXT, TokenType.VISION, TokenType.TIMESTEP, TokenType.NOISE)


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}  {self.detail}".rstrip()


# --------------------------------------------------------------- oracles


def rule_mask(tags) -> np.ndarray:
    """Direct evaluation of the four masking rules, one (query, key) pair at a time."""
    n = len(tags)
    span = []
    current = 0
    for i in range(n):
        if i > 0 and tags[i] != tags[i - 1]:
            current += 1
        span.append(current)
    out = np.zeros((n, n), dtype=bool)
    for q in range(n):
        for k in range(n):
            if span[k] < span[q]:
                out[q, k] = True  # earlier span
            elif span[k] > span[q]:
                out[q, k] = False  # later span
            elif tags[q] in (TokenType.VISION, TokenType.NOISE):
                out[q, k] = True  # bidirectional span
            else:
                out[q, k] = k <= q  # causal span
    return out


def tiny_config(**kw) -> ModelConfig:
    base = dict(d=8, heads=2, d_ff=16, d_t=8, n_pre=1, n_base=1, n_post=1, image_size=4,
                channels=1, patch_size=2, cond_len=3, text_len=4, adaln_init_std=0.5)
    base.update(kw)
    return ModelConfig(**base)


def tiny_bundle(seed: int = 0, **kw) -> ModelBundle:
    b = ModelBundle(tiny_config(**kw), seed=seed).double()
    b.prescale_pre.gamma_ = {"T": 1.0, "V": 0.7, "S": 1.3, "N": 0.5}
    b.prescale_post.gamma_ = {"T": 0.9, "S": 1.1, "N": 0.6}
    return b


# ----------------------------------------------------------------- suites


def suite_masks(n_random: int = 10_000, seed: int = 0) -> list[Check]:
    t0 = time.perf_counter()
    mismatches = 0
    cases = 0
    for L in range(1, 6):
        for tags in itertools.product(ALPHABET, repeat=L):
            cases += 1
            mismatches += not np.array_equal(build_mask(TokenTypeSequence(tags)).allowed, rule_mask(tags))
    exhaustive = cases
    rng = np.random.default_rng(seed)
    for _ in range(n_random):
        L = int(rng.integers(1, 9))
        tags = tuple(ALPHABET[i] for i in rng.integers(0, 4, size=L))
        cases += 1
        mismatches += not np.array_equal(build_mask(TokenTypeSequence(tags)).allowed, rule_mask(tags))
    elapsed = time.perf_counter() - t0
    checks = [Check("mask oracle equivalence", mismatches == 0 and exhaustive == 1364 and elapsed < 10,
                    f"{cases} cases ({exhaustive} exhaustive), {mismatches} mismatches, {elapsed:.2f}s")]

    bad = 0
    for L in range(1, 8):
        for _ in range(60):
            tags = [ALPHABET[i] for i in rng.integers(0, 4, size=L)]
            m = build_mask(TokenTypeSequence((tags[0],)))
            for t in tags[1:]:
                m = extend_mask_for_decoding(m, t)
            bad += m != build_mask(TokenTypeSequence(tuple(tags)))
    checks.append(Check("incremental mask equivalence", bad == 0, f"{bad} mismatches"))

    g = torch.Generator().manual_seed(seed)
    worst_row, leak = 0.0, 0.0
    for s in ("TTVVVTT", "TSTNNNT", "VVVV", "TNTN"):
        m = build_mask(s).as_tensor()
        logits = torch.randn(len(s), len(s), generator=g, dtype=torch.float64)
        w = torch.softmax(logits.masked_fill(~m, float("-inf")), -1)
        leak = max(leak, float(w[~m].abs().max()) if (~m).any() else 0.0)
        worst_row = max(worst_row, float((w.sum(-1) - 1).abs().max()))
    checks.append(Check("masked attention weights", leak == 0.0 and worst_row < 1e-12,
                        f"max disallowed weight {leak}, row-sum err {worst_row:.1e}"))
    return checks


def suite_gradients(tol: float = 1e-4, max_entries: int = 24, seed: int = 0) -> list[Check]:
    t0 = time.perf_counter()
    checks = []
    torch.manual_seed(seed)
    g = torch.Generator().manual_seed(seed)
    dt = torch.float64

    layer = AdaLNLayer(4, 6, init_std=0.5).double()
    h = torch.randn(5, 4, generator=g, dtype=dt)
    theta = torch.randn(6, generator=g, dtype=dt)

    def f_adaln():
        S = layer.compute_state_matrix(TimeEmbedding(theta))
        out, gate = layer(h, S)
        return (out * torch.linspace(-1, 1, 4, dtype=dt)).sum() + (gate ** 2).sum()

    checks.append(_fd("gradient: multimodal AdaLN", f_adaln, layer, tol, max_entries))

    cfg = BlockConfig(8, 2, 16)
    a1, a2 = AdaLNLayer(8, 8, init_std=0.5).double(), AdaLNLayer(8, 8, init_std=0.5).double()
    blk = HaploBlock(cfg, a1, a2).double()
    hb = torch.randn(1, 4, 8, generator=g, dtype=dt)
    tb = torch.randn(8, generator=g, dtype=dt)
    mb = build_mask("TTVV").as_tensor()
    pos = torch.arange(4)[:, None].repeat(1, 2)
    wb = torch.randn(1, 4, 8, generator=g, dtype=dt)
    params = dict(blk.named_parameters())
    params.update({f"adaln_1.{k}": v for k, v in a1.named_parameters()})
    params.update({f"adaln_2.{k}": v for k, v in a2.named_parameters()})

    def f_block():
        return (blk(hb, mb, TimeEmbedding(tb), positions=pos) * wb).sum()

    checks.append(_fd("gradient: HaploOmni block", f_block, params, tol, max_entries))

    con = Connector(4).double()
    with torch.no_grad():
        con.W_SN.normal_(0, 1.0, generator=g)
        con.W_prime.normal_(0, 1.0, generator=g)
    X = torch.randn(3, 4, generator=g, dtype=dt)
    wc = torch.randn(3, 4, generator=g, dtype=dt)
    checks.append(_fd("gradient: connector (soft)", lambda: (con(X) * wc).sum(), con, tol, max_entries))

    bundle = tiny_bundle(seed)
    sched = NoiseSchedule()
    x0 = torch.randn(2, bundle.config.n_patches, bundle.config.d_lat, generator=g, dtype=dt)
    nb = forward_noise(sched, x0, torch.tensor([40, 700]), g)
    gplan = bundle.generation_plan(["ab", "c"])

    def f_gen():
        return diffusion_loss(bundle.forward_generation(gplan, nb.x_t, nb.t), nb)

    checks.append(_fd("gradient: full generation forward", f_gen, bundle, tol, max_entries))

    patches = torch.randn(2, bundle.config.n_patches, bundle.config.d_lat, generator=g, dtype=dt)
    uplan = bundle.understanding_plan(patches, answers=["hi", "yo"])
    ti = uplan.idx(TokenType.TEXT)

    def f_und():
        return ntp_loss(bundle.forward_understanding(uplan), uplan.targets[:, ti], uplan.loss_mask[:, ti])

    checks.append(_fd("gradient: understanding forward + text head", f_und, bundle, tol, max_entries))
    elapsed = time.perf_counter() - t0
    checks.append(Check("gradient suite runtime", elapsed < 120, f"{elapsed:.1f}s"))
    return checks


def _fd(name, f, params, tol, max_entries) -> Check:
    rep = finite_difference_check(f, params, h=1e-5, tol=tol, max_entries=max_entries)
    worst, err = rep.worst()
    return Check(name, rep.passed, f"max rel err {err:.2e} ({worst}), {rep.checked_entries} entries")


@torch.no_grad()
def suite_adaln(seed: int = 0) -> list[Check]:
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    layer = AdaLNLayer(16, 8, init_std=0.5)
    h = torch.randn(2, 7, 16, generator=g)
    with torch.no_grad():
        S = layer.compute_state_matrix(TimeEmbedding(torch.randn(8, generator=g)))
    worst = 0.0
    with torch.no_grad():
        for col in (0, 1):
            delta = torch.zeros(2, 7, 2)
            delta[..., col] = 1.0
            out, gate = layer(h, S, delta=delta)
            ref, rgate = single_expert_adaln(h, S, col)
            worst = max(worst, float((out - ref).abs().max()), float((gate - rgate).abs().max()))
    checks = [Check("one-hot switch reduces to single-expert AdaLN", worst < 1e-6, f"max err {worst:.1e}")]

    out, gate = layer(h, S)
    delta = layer.switch_scores(h)
    mixed = torch.einsum("blk,rkd->blrd", delta, S.entries)
    lo = torch.minimum(S.entries[:, 0], S.entries[:, 1])
    hi = torch.maximum(S.entries[:, 0], S.entries[:, 1])
    convex = bool(((mixed >= lo - 1e-6) & (mixed <= hi + 1e-6)).all())
    rowsum = float((delta.sum(-1) - 1).abs().max())
    checks.append(Check("switch scores convex and normalised", convex and rowsum < 1e-6,
                        f"row-sum err {rowsum:.1e}"))

    cfg = BlockConfig(16, 4, 32)
    layer = layer.double()
    blk = HaploBlock(cfg, layer, AdaLNLayer(16, 8, init_std=0.5).double()).double()
    hd = h.double()
    out = blk(hd, build_mask("TTTVVVT").as_tensor(), StateMatrix.zeros(16, torch.float64),
              positions=torch.arange(7)[:, None].repeat(1, 2))
    ident = float((out - hd).abs().max())
    checks.append(Check("zero state matrix makes block the identity", ident < 1e-6, f"max err {ident:.1e}"))

    with torch.no_grad():
        emb = TimeEmbedding(sinusoidal(17, 8, dtype=torch.float64), t=17)
        s1 = layer.compute_state_matrix(emb)
        layer.clear_cache()
        s2 = layer.compute_state_matrix(emb)
        s3 = layer.compute_state_matrix(emb)
    same = torch.equal(s1.entries, s2.entries) and s2 is s3
    checks.append(Check("state matrix cache consistency", same, "cached == recomputed bitwise"))
    return checks


def suite_diffusion(seed: int = 0) -> list[Check]:
    sched = NoiseSchedule()
    g = torch.Generator().manual_seed(seed)
    x0 = torch.rand(1, 16, 48, generator=g) * 2 - 1
    ab = sched.alpha_bar

    def oracle(x_t, t):
        a = ab(t)
        return ((x_t.double() - a.sqrt() * x0.double()) / (1 - a).sqrt()).to(x_t.dtype)

    checks = []
    for steps in (1, 50):
        out = sample(oracle, None, steps, torch.Generator().manual_seed(seed), sched, shape=x0.shape)
        err = float((out - x0).abs().max())
        checks.append(Check(f"DDIM inversion with oracle predictor ({steps} steps)", err < 1e-4,
                            f"max abs err {err:.1e}"))
    nb = forward_noise(sched, x0.expand(4, -1, -1), torch.tensor([1, 10, 500, 1000]), g)
    a = ab(nb.t)[:, None, None]
    rec = (nb.x_t.double() - a.sqrt() * nb.x0.double()) / (1 - a).sqrt()
    err = float((rec - nb.eps.double()).abs().max())
    checks.append(Check("forward noise stored-eps reconstruction", err < 1e-4, f"max abs err {err:.1e}"))
    mono = bool((sched.alphas_cumprod[1:] < sched.alphas_cumprod[:-1]).all())
    checks.append(Check("alpha-bar strictly decreasing", mono))
    return checks


def suite_cache(n_seeds: int = 20, steps: int = 32) -> list[Check]:
    cfg = ModelConfig(d=32, heads=2, d_ff=64, d_t=16, n_pre=1, n_base=2, n_post=1, adaln_init_std=0.3)
    agree = 0
    for s in range(n_seeds):
        bundle = ModelBundle(cfg, seed=s)
        bundle.eval()
        g = torch.Generator().manual_seed(1000 + s)
        vis = torch.rand(cfg.n_patches, cfg.d_lat, generator=g) * 2 - 1
        a = decode(bundle, vis, b"q", max_new=steps, temperature=0.0, use_cache=True, stop_at_eos=False)
        b = decode(bundle, vis, b"q", max_new=steps, temperature=0.0, use_cache=False, stop_at_eos=False)
        agree += a == b and len(a) == steps
    return [Check("KV-cache greedy decode equals full recompute", agree == n_seeds,
                  f"{agree}/{n_seeds} seeds identical over {steps} tokens")]


SUITES = {
    "masks": suite_masks,
    "gradients": suite_gradients,
    "adaln": suite_adaln,
    "diffusion": suite_diffusion,
    "cache": suite_cache,
}


def run_suite(name: str) -> list[Check]:
    if name == "all":
        out = []
        for fn in SUITES.values():
            out.extend(fn())
        return out
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {', '.join(list(SUITES) + ['all'])}")
    return SUITES[name]()
