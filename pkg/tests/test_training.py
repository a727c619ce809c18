import math

import numpy as np
import pytest
import torch

from haploomni.model import ModelBundle
from haploomni.training import (
    DEFAULT_PLANS, METRIC_FIELDS, STAGES, DivergenceError, SequencingError, StagePlan, TeacherBundle,
    default_plan, distillation_loss, identity_loss, metrics_csv, optimizer_step, read_metrics, run_stage,
    stage_losses, Batcher,
)
from haploomni.diffusion import NoiseSchedule
from haploomni.numeric import parameter_digests


def _adamw_reference(p0, grads, lr, b1, b2, wd, eps=1e-8):
    """Plain-float AdamW trace."""
    p = list(p0)
    m = [0.0] * len(p)
    v = [0.0] * len(p)
    trace = []
    for t, g in enumerate(grads, 1):
        for i in range(len(p)):
            p[i] *= 1 - lr * wd
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            mh = m[i] / (1 - b1 ** t)
            vh = v[i] / (1 - b2 ** t)
            p[i] -= lr * mh / (math.sqrt(vh) + eps)
        trace.append(list(p))
    return trace


@pytest.mark.parametrize("wd", [0.0, 0.1])
def test_optimizer_step_matches_hand_trace(wd):
    grads = [[0.5, -1.0, 0.0], [0.25, 2.0, -0.1], [-0.75, 0.5, 0.3]]
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64))
    ref = _adamw_reference([1.0, -2.0, 0.5], grads, 0.01, 0.9, 0.999, wd)
    state = None
    for g, want in zip(grads, ref):
        state = optimizer_step([p], [torch.tensor(g, dtype=torch.float64)], state, lr=0.01, weight_decay=wd)
        assert p.detach().tolist() == pytest.approx(want, rel=1e-12, abs=1e-15)


def test_first_adam_step_is_sign_of_gradient():
    p = torch.nn.Parameter(torch.zeros(4, dtype=torch.float64))
    optimizer_step([p], [torch.tensor([3.0, -0.2, 1e-3, -50.0], dtype=torch.float64)], lr=0.1)
    assert p.detach().tolist() == pytest.approx([-0.1, 0.1, -0.1, 0.1], rel=1e-4)


def test_zero_gradient_no_decay_leaves_params():
    p = torch.nn.Parameter(torch.tensor([1.5, -0.5], dtype=torch.float64))
    optimizer_step([p], [torch.zeros(2, dtype=torch.float64)], lr=0.1)
    assert p.detach().tolist() == [1.5, -0.5]


def test_identity_loss_values():
    x = torch.randn(3, 5, dtype=torch.float64)
    assert identity_loss(x, x).item() == 0.0
    assert identity_loss(x + 2.0, x).item() == pytest.approx(4.0)
    with pytest.raises(ValueError):
        identity_loss(x, x[:2])


def test_distillation_loss_does_not_backprop_into_teacher():
    s = torch.randn(4, dtype=torch.float64, requires_grad=True)
    t = torch.randn(4, dtype=torch.float64, requires_grad=True)
    distillation_loss(s, t).backward()
    assert t.grad is None
    assert torch.allclose(s.grad, 2 * (s - t).detach() / 4)


def test_teachers_are_frozen_and_seeded(small_cfg):
    a = TeacherBundle.build(small_cfg, 7)
    b = TeacherBundle.build(small_cfg, 7)
    c = TeacherBundle.build(small_cfg, 8)
    assert all(not p.requires_grad for p in a.pre.parameters())
    assert torch.equal(a.pre.A, b.pre.A) and torch.equal(a.post.B, b.post.B)
    assert not torch.equal(a.pre.A, c.pre.A)


def test_default_plans_cover_all_stages():
    assert tuple(DEFAULT_PLANS) == STAGES
    assert DEFAULT_PLANS["align-1"].trainable == ("pre_connector.*",)
    assert DEFAULT_PLANS["unified"].trainable == ("*",)
    with pytest.raises(ValueError):
        StagePlan("nope", ("*",), (("ntp", 1.0),), lr=1e-3)


def test_relax_widens_trainable_set(small_cfg):
    names = [n for n, _ in ModelBundle(small_cfg).named_parameters()]
    plan = DEFAULT_PLANS["align-2"]
    early = set(plan.trainable_names(names, step=plan.relax_after))
    late = set(plan.trainable_names(names, step=plan.relax_after + 1))
    assert early < late
    assert all(n.startswith("post_connector.") for n in early)
    assert any(n.startswith("post_decoder.") for n in late - early)


@pytest.mark.parametrize("stage", STAGES)
def test_freeze_soundness_every_stage(stage, small_cfg, small_data):
    bundle = ModelBundle(small_cfg, seed=0)
    plan = default_plan(stage, steps=3, batch_size=2,
                        **({"relax_after": 1} if stage == "align-2" else {}))
    names = [n for n, _ in bundle.named_parameters()]
    trainable = set(plan.trainable_names(names))
    before = parameter_digests(bundle)
    res = run_stage(plan, bundle, small_data, seed=0, check_order=False)
    after = parameter_digests(bundle)
    assert res.frozen_unchanged
    assert all(before[n] == after[n] for n in names if n not in trainable)
    assert any(before[n] != after[n] for n in trainable)
    assert len(res.metrics) == 3


def test_warmup_pre_leaves_base_decoder(small_cfg, small_data):
    bundle = ModelBundle(small_cfg, seed=0)
    before = parameter_digests(bundle)
    run_stage(default_plan("warmup-pre", steps=2, batch_size=2), bundle, small_data, check_order=False)
    after = parameter_digests(bundle)
    assert all(before[n] == after[n] for n in before if n.startswith("base_decoder."))


def test_loss_weights_scale_linearly(small_cfg, small_data):
    bundle = ModelBundle(small_cfg, seed=0).double()
    sched = NoiseSchedule()
    teachers = TeacherBundle.build(small_cfg).to(torch.float64)
    totals = {}
    for w in (1.0, 2.5):
        plan = default_plan("align-3", losses=(("ntp", w), ("diff", 1.0)), batch_size=2)
        batcher = Batcher(small_data, small_cfg, sched, seed=3, dtype=torch.float64)
        totals[w] = stage_losses(bundle, plan, batcher, teachers)
    (t1, p1), (t2, p2) = totals[1.0], totals[2.5]
    assert torch.allclose(p1["ntp"], p2["ntp"]) and torch.allclose(p1["diff"], p2["diff"])
    assert t2.item() == pytest.approx(2.5 * p1["ntp"].item() + p1["diff"].item(), rel=1e-12)


def test_stage_is_deterministic(small_cfg, small_data, tmp_path):
    outs = []
    for i in range(2):
        bundle = ModelBundle(small_cfg, seed=0)
        run_stage(default_plan("align-3", steps=4, batch_size=2), bundle, small_data, seed=5,
                  out_dir=tmp_path / str(i), check_order=False)
        outs.append(((tmp_path / str(i) / "align-3.csv").read_bytes(),
                     (tmp_path / str(i) / "align-3.ckpt").read_bytes()))
    assert outs[0] == outs[1]


def test_sequencing_enforced(small_cfg, small_data):
    bundle = ModelBundle(small_cfg, seed=0)
    with pytest.raises(SequencingError, match="warmup-pre"):
        run_stage(default_plan("align-1", steps=1, batch_size=2), bundle, small_data)
    for stage in ("warmup-pre", "warmup-post"):
        run_stage(default_plan(stage, steps=1, batch_size=2), bundle, small_data)
    run_stage(default_plan("align-1", steps=1, batch_size=2), bundle, small_data)
    assert bundle.extra_meta["stages"] == ["warmup-pre", "warmup-post", "align-1"]


def test_divergence_raises(small_cfg, small_data):
    bundle = ModelBundle(small_cfg, seed=0)
    with torch.no_grad():
        bundle.noise_head.fill_(float("nan"))
    with pytest.raises(DivergenceError) as err:
        run_stage(default_plan("align-3", steps=2, batch_size=2), bundle, small_data, check_order=False)
    assert err.value.step == 1


def test_warmup_lr_ramp(small_cfg, small_data):
    bundle = ModelBundle(small_cfg, seed=0)
    res = run_stage(default_plan("align-1", steps=4, batch_size=2, warmup_steps=4, lr=1e-3), bundle,
                    small_data, check_order=False)
    assert res.series("lr") == pytest.approx([2.5e-4, 5e-4, 7.5e-4, 1e-3])


def test_metrics_csv_format(small_cfg, small_data, tmp_path):
    bundle = ModelBundle(small_cfg, seed=0)
    res = run_stage(default_plan("warmup-pre", steps=2, batch_size=2), bundle, small_data, seed=9,
                    out_dir=tmp_path, check_order=False)
    text = res.csv_path.read_text()
    assert text.startswith("# stage=warmup-pre\n")
    assert ",".join(METRIC_FIELDS) in text.splitlines()
    rows = read_metrics(res.csv_path)
    assert [r["step"] for r in rows] == ["1", "2"]
    assert rows[0]["loss_ntp"] is None and rows[0]["seed"] == "9"
    assert float(rows[1]["loss_total"]) == res.metrics[1]["loss_total"]
    assert metrics_csv(res.plan, res.metrics) == text


def test_warmup_pre_reduces_loss(small_cfg, small_data):
    bundle = ModelBundle(small_cfg, seed=0)
    res = run_stage(default_plan("warmup-pre", steps=60, batch_size=4, lr=1e-2), bundle, small_data,
                    check_order=False)
    loss = res.series("loss_total")
    assert np.mean(loss[-5:]) < 0.5 * np.mean(loss[:5])
