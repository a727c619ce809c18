import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from haploomni.connectors import (
    CalibrationError,
    Connector,
    PreScaler,
    apply_prescaler,
    calibrate_prescaler,
    connector_forward,
)
from haploomni.masking import TokenType, TokenTypeSequence
from haploomni.numeric import DimensionError, finite_difference_check, layer_norm


def conn(d=4, seed=0):
    torch.manual_seed(seed)
    return Connector(d).double()


def test_forced_scores_select_paths():
    c = conn()
    X = torch.randn(3, 4, dtype=torch.float64)
    Xt = c.transformed(X)
    assert torch.allclose(Xt, torch.nn.functional.silu(layer_norm(X)) @ c.W_prime, atol=1e-14)
    P0 = torch.tensor([[1.0, 0.0]] * 3, dtype=torch.float64)
    assert torch.equal(c(X, scores=P0), Xt)
    assert torch.equal(c(X, scores=P0.flip(-1)), X)


def test_zero_router_averages_paths():
    c = conn()
    with torch.no_grad():
        c.W_SN.zero_()
    X = torch.randn(3, 4, dtype=torch.float64)
    assert torch.allclose(connector_forward(c, X), (c.transformed(X) + X) / 2, atol=1e-14)


def test_width_checked():
    with pytest.raises(DimensionError):
        conn()(torch.zeros(2, 5, dtype=torch.float64))


def test_soft_gradients_match_finite_differences():
    c = conn(seed=4)
    X = torch.randn(3, 4, dtype=torch.float64)
    w = torch.randn(3, 4, dtype=torch.float64)
    rep = finite_difference_check(lambda: (c(X) * w).sum(), c)
    assert rep.passed, rep.rel_errors


def test_hard_routing_passes_rows_bitwise():
    c = conn()
    c.eval()
    c.routing_mode = "hard"
    with torch.no_grad():
        c.W_SN.zero_()
        c.W_SN[:, 1] = 50.0
    X = torch.rand(6, 4, dtype=torch.float64) + 0.5  # silu > 0 so column 1 dominates
    with torch.no_grad():
        assert torch.equal(c(X), X)


def test_hard_routing_refuses_training():
    c = conn()
    c.routing_mode = "hard"
    X = torch.randn(2, 4, dtype=torch.float64, requires_grad=True)
    with pytest.raises(RuntimeError):
        c(X)
    with pytest.raises(ValueError):
        c.routing_mode = "sticky"


def test_hard_soft_consistent_when_confident():
    c = conn(seed=1)
    c.eval()
    X = torch.randn(20, 4, dtype=torch.float64)
    with torch.no_grad():
        c.W_SN.copy_(torch.randn(4, 2, dtype=torch.float64) * 40)
        soft = c(X)
        c.routing_mode = "hard"
        hard = c(X)
    P = c.scores(X)
    confident = P.max(-1).values >= 0.99
    rel = (hard - soft).norm(dim=-1) / soft.norm(dim=-1)
    assert confident.any()
    assert torch.all(rel[confident] < 0.02)


def _stream(rms_by_type, seed=0, n=4):
    g = torch.Generator().manual_seed(seed)
    seq = TokenTypeSequence.of("TTVVVSNNNN")
    out = []
    for _ in range(n):
        X = torch.randn(2, len(seq), 6, generator=g, dtype=torch.float64)
        for t, r in rms_by_type.items():
            pos = seq.positions_of(TokenType(t))
            X[:, pos] = X[:, pos] / X[:, pos].pow(2).mean().sqrt() * r
        out.append((X, seq))
    return out


def test_uncalibrated_is_identity_with_unit_gains():
    ps = PreScaler()
    X = torch.randn(4, 3)
    seq = TokenTypeSequence.of("TVSN")
    assert torch.equal(apply_prescaler(ps, X, seq), X)
    assert set(ps.gamma.values()) == {1.0}
    with pytest.raises(NotFittedError):
        ps.check_fitted()


def test_ten_x_noise_scenario():
    stream = _stream({"T": 1.0, "V": 1.0, "S": 1.0, "N": 10.0})
    ps = calibrate_prescaler(PreScaler(target_rms=1.0), stream)
    assert ps.gamma[TokenType.NOISE] == pytest.approx(0.1, rel=1e-9)
    assert ps.gamma[TokenType.VISION] == pytest.approx(1.0, rel=1e-9)


def test_constant_magnitude_gives_unit_gain():
    seq = TokenTypeSequence.of("TT")
    ps = PreScaler(target_rms=3.0, types=("T",)).fit([(torch.full((2, 5), 3.0), seq)])
    assert ps.gamma[TokenType.TEXT] == pytest.approx(1.0)


@given(st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_applied_rms_hits_target(seed):
    g = np.random.default_rng(seed)
    scales = {c: float(g.uniform(0.1, 20)) for c in "TVSN"}
    stream = _stream(scales, seed=seed)
    ps = PreScaler(target_rms=2.5).fit(stream)
    for c in "TVSN":
        vals = []
        for X, seq in stream:
            Y = ps.transform(X, seq) if X.dim() == 2 else torch.stack([ps.transform(x, seq) for x in X])
            vals.append(Y[:, seq.positions_of(TokenType(c))].reshape(-1))
        rms = torch.cat(vals).pow(2).mean().sqrt()
        assert abs(float(rms) - 2.5) / 2.5 < 0.1


def test_calibration_idempotent_and_monotone():
    stream = _stream({"T": 2.0, "V": 3.0, "S": 1.0, "N": 7.0})
    a = PreScaler().fit(stream).gamma_
    b = PreScaler().fit(stream).gamma_
    assert a == b
    scaled = [(X * torch.where(torch.tensor([t is TokenType.VISION for t in seq.tags])[:, None], 4.0, 1.0), seq)
              for X, seq in stream]
    c = PreScaler().fit(scaled).gamma_
    assert c["V"] == pytest.approx(a["V"] / 4, rel=1e-12)
    assert c["T"] == pytest.approx(a["T"], rel=1e-12)


def test_missing_type_is_reported():
    seq = TokenTypeSequence.of("TTV")
    with pytest.raises(CalibrationError, match="S, N"):
        PreScaler().fit([(torch.randn(3, 4), seq)])


def test_per_row_scaling_matches_loop():
    ps = PreScaler().fit(_stream({"T": 0.5, "V": 2.0, "S": 3.0, "N": 8.0}))
    seq = TokenTypeSequence.of("TVVSNNT")
    X = torch.randn(7, 5, dtype=torch.float64)
    Y = apply_prescaler(ps, X, seq)
    for i, t in enumerate(seq.tags):
        assert torch.allclose(Y[i], X[i] * ps.gamma[t])
    ps2 = PreScaler(types=("T",))
    ps2.gamma_ = {"T": 2.0}
    assert torch.equal(ps2.transform(torch.ones(2, 3), TokenTypeSequence.of("TT")), torch.full((2, 3), 2.0))


def test_estimator_protocol():
    ps = PreScaler(target_rms=2.0, types=("T", "N"))
    assert ps.get_params() == {"target_rms": 2.0, "types": ("T", "N")}
    fresh = clone(ps)
    assert not fresh.calibrated
    fitted = PreScaler().fit(_stream({"T": 1, "V": 2, "S": 3, "N": 4}))
    restored = PreScaler.from_state(fitted.state())
    assert restored.gamma_ == fitted.gamma_
    with pytest.raises(CalibrationError):
        PreScaler(target_rms=0).fit([])
