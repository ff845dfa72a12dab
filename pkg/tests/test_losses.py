import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from cgh.losses import (cgh_loss, cosine_similarity, cross_entropy, log_similarity_distribution,
                        similarity_distribution)

torch.set_default_dtype(torch.float32)


def _t(x):
    return torch.tensor(x, dtype=torch.float64)


# ---- cosine similarity -------------------------------------------------
def test_cosine_identical():
    e1 = _t([1.0, 0.0, 0.0])
    assert float(cosine_similarity(e1, e1)) == 1.0


def test_cosine_opposite():
    e1 = _t([1.0, 0.0, 0.0])
    assert float(cosine_similarity(e1, -e1)) == -1.0


def test_cosine_diagonal():
    got = float(cosine_similarity(_t([1.0, 1.0, 0.0]), _t([1.0, 0.0, 0.0])))
    assert got == pytest.approx(oracles.cosine([1, 1, 0], [1, 0, 0]), abs=1e-12)
    assert got == pytest.approx(0.70710678, abs=1e-8)


def test_cosine_zero_vector_rejected():
    with pytest.raises(ValueError):
        cosine_similarity(_t([0.0, 0.0]), _t([1.0, 0.0]))


# ---- similarity distribution --------------------------------------------
def test_equal_bank_entries_give_uniform():
    bank = _t([[0.6, 0.8]] * 5)
    p = similarity_distribution(_t([1.0, 0.0]), bank, 0.04)
    assert torch.allclose(p, torch.full((5,), 0.2, dtype=torch.float64), atol=1e-15)


def test_three_entry_softmax():
    bank = _t([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])  # sims 1, 0, -1
    p = similarity_distribution(_t([1.0, 0.0]), bank, 0.1)
    w = [math.exp(10), 1.0, math.exp(-10)]
    expected = [x / sum(w) for x in w]
    assert p.tolist() == pytest.approx(expected, abs=1e-12)


@given(scale=st.floats(0.01, 100.0))
def test_positive_scaling_is_invisible(scale):
    gen = torch.Generator().manual_seed(3)
    z = torch.randn(4, 8, generator=gen)
    bank = torch.randn(6, 8, generator=gen)
    p = similarity_distribution(z, bank, 0.08)
    q = similarity_distribution(z * scale, bank, 0.08)
    # normalisation absorbs the scale up to float rounding of z / |z|
    assert torch.allclose(p, q, rtol=0, atol=1e-6)


def test_power_of_two_scaling_bit_identical():
    z = torch.randn(3, 8, generator=torch.Generator().manual_seed(0))
    bank = torch.randn(5, 8, generator=torch.Generator().manual_seed(1))
    assert torch.equal(similarity_distribution(z, bank, 0.1), similarity_distribution(4.0 * z, bank, 0.1))


def test_distribution_rows_sum_to_one_and_match_log_version():
    gen = torch.Generator().manual_seed(5)
    z, bank = torch.randn(7, 16, generator=gen), torch.randn(32, 16, generator=gen)
    p = similarity_distribution(z, bank, 0.02)
    assert torch.allclose(p.sum(1), torch.ones(7), atol=1e-6)
    assert torch.allclose(log_similarity_distribution(z, bank, 0.02).exp(), p, atol=1e-6)


def test_nonpositive_temperature_rejected():
    with pytest.raises(ValueError):
        similarity_distribution(torch.ones(2), torch.ones(3, 2), 0.0)


def test_tiny_temperature_stays_finite():
    gen = torch.Generator().manual_seed(9)
    p = similarity_distribution(torch.randn(4, 8, generator=gen), torch.randn(10, 8, generator=gen), 1e-6)
    assert torch.isfinite(p).all()


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_lower_temperature_sharpens(seed):
    gen = torch.Generator().manual_seed(seed)
    z, bank = torch.randn(16, generator=gen, dtype=torch.float64), torch.randn(8, 16, generator=gen,
                                                                               dtype=torch.float64)
    peaks = [float(similarity_distribution(z, bank, tau).max()) for tau in (0.1, 0.08, 0.06, 0.04, 0.02)]
    assert all(b > a for a, b in zip(peaks, peaks[1:]))


# ---- cross-entropy --------------------------------------------------------
def test_uniform_prediction_gives_log_m():
    pred = torch.full((4,), 0.25, dtype=torch.float64)
    for target in ([1, 0, 0, 0], [0.1, 0.2, 0.3, 0.4]):
        assert float(cross_entropy(pred, _t(target))) == pytest.approx(1.3862944, abs=1e-7)


def test_prediction_equal_to_target_gives_entropy():
    t = _t([0.5, 0.25, 0.25])
    assert float(cross_entropy(t, t)) == pytest.approx(1.5 * math.log(2), abs=1e-12)


def test_cross_entropy_frozen_value():
    got = float(cross_entropy(_t([0.7, 0.2, 0.1]), _t([0.5, 0.3, 0.2])))
    assert got == pytest.approx(oracles.cross_entropy([0.7, 0.2, 0.1], [0.5, 0.3, 0.2]), rel=1e-12)
    assert got == pytest.approx(1.1216858643, abs=1e-9)


def test_cross_entropy_zero_mass_mismatch():
    with pytest.raises(ValueError):
        cross_entropy(_t([1.0, 0.0]), _t([0.5, 0.5]))


def test_cross_entropy_detaches_target():
    pred = torch.tensor([0.3, 0.7], requires_grad=True)
    target = torch.tensor([0.6, 0.4], requires_grad=True)
    cross_entropy(pred, target).backward()
    assert target.grad is None


# ---- full objective ---------------------------------------------------------
def _unit(gen, *shape):
    x = torch.randn(*shape, generator=gen, dtype=torch.float64)
    return x / x.norm(dim=-1, keepdim=True)


def _instance(seed, batch=3, dim=5, m=6):
    gen = torch.Generator().manual_seed(seed)
    return dict(z_g1=_unit(gen, batch, dim), z_h1=_unit(gen, batch, dim), z_g2=_unit(gen, batch, dim),
                z_h2=_unit(gen, batch, dim), bank=_unit(gen, m, dim), hyper_bank=_unit(gen, m, dim))


@pytest.mark.parametrize("variant", ["cross", "same", "global"])
def test_loss_matches_scalar_oracle(variant):
    inst = _instance(11)
    out = cgh_loss(**inst, tau_s=0.1, tau_t=0.04, tau_h=0.08, variant=variant)
    ref = oracles.cgh_loss(*(inst[k].tolist() for k in ("z_g1", "z_h1", "z_g2", "z_h2", "bank", "hyper_bank")),
                           0.1, 0.04, 0.08, variant)
    assert float(out.loss) == pytest.approx(ref[0], rel=1e-9)
    assert float(out.loss_gh) == pytest.approx(ref[1], rel=1e-9)
    assert float(out.loss_hg) == pytest.approx(ref[2], abs=1e-12)


def test_two_entry_bank_hand_built():
    # M=2, dim 2: everything lies on the unit circle
    bank = _t([[1.0, 0.0], [0.0, 1.0]])
    zg1, zh1 = _t([[0.6, 0.8]]), _t([[0.8, 0.6]])
    zg2, zh2 = _t([[1.0, 0.0]]), _t([[0.0, 1.0]])
    out = cgh_loss(zg1, zh1, zg2, zh2, bank, bank, 0.1, 0.04, 0.08, "cross")
    ref = oracles.cgh_loss([[0.6, 0.8]], [[0.8, 0.6]], [[1, 0]], [[0, 1]], [[1, 0], [0, 1]], [[1, 0], [0, 1]],
                           0.1, 0.04, 0.08, "cross")
    assert float(out.loss) == pytest.approx(ref[0], rel=1e-12)


def test_symmetric_inputs_give_equal_terms():
    inst = _instance(4)
    inst["z_h1"], inst["z_h2"], inst["hyper_bank"] = inst["z_g1"], inst["z_g2"], inst["bank"]
    out = cgh_loss(**inst, tau_s=0.07, tau_t=0.07, tau_h=0.07, variant="cross")
    assert float(out.loss_gh) == pytest.approx(float(out.loss_hg), rel=1e-12)


def test_global_variant_is_single_term():
    inst = _instance(8)
    out = cgh_loss(**inst, tau_s=0.1, tau_t=0.04, tau_h=0.08, variant="global")
    logp = log_similarity_distribution(inst["z_g1"], inst["bank"], 0.1)
    target = similarity_distribution(inst["z_g2"], inst["bank"], 0.04)
    assert float(out.loss_hg) == 0.0
    assert float(out.loss) == pytest.approx(float(-(target * logp).sum(1).mean()), rel=1e-12)
    assert "hypercolumn" not in out.teacher_dists


def test_unknown_variant_and_missing_context():
    inst = _instance(1)
    with pytest.raises(ValueError):
        cgh_loss(**inst, tau_s=0.1, tau_t=0.04, tau_h=0.08, variant="both")
    inst["z_h1"] = None
    with pytest.raises(ValueError):
        cgh_loss(**inst, tau_s=0.1, tau_t=0.04, tau_h=0.08, variant="cross")


@pytest.mark.parametrize("variant", ["cross", "same", "global"])
def test_gradients_match_finite_differences(variant):
    inst = _instance(21, batch=2, dim=4, m=5)
    z_g1 = inst["z_g1"].clone().requires_grad_(True)
    z_h1 = inst["z_h1"].clone().requires_grad_(True)
    z_g2 = inst["z_g2"].clone().requires_grad_(True)
    z_h2 = inst["z_h2"].clone().requires_grad_(True)

    def f(a, b):
        return cgh_loss(a, b, z_g2, z_h2, inst["bank"], inst["hyper_bank"], 0.1, 0.04, 0.08, variant).loss

    f(z_g1, z_h1).backward()
    assert z_g2.grad is None and z_h2.grad is None
    eps = 1e-6
    for tensor, grad in ((z_g1, z_g1.grad), (z_h1, z_h1.grad)):
        num = torch.zeros_like(tensor)
        for idx in range(tensor.numel()):
            plus, minus = tensor.detach().clone(), tensor.detach().clone()
            plus.view(-1)[idx] += eps
            minus.view(-1)[idx] -= eps
            args_p = (plus, z_h1.detach()) if tensor is z_g1 else (z_g1.detach(), plus)
            args_m = (minus, z_h1.detach()) if tensor is z_g1 else (z_g1.detach(), minus)
            num.view(-1)[idx] = (f(*args_p) - f(*args_m)) / (2 * eps)
        if variant == "global" and tensor is z_h1:
            assert grad is None or torch.all(grad == 0)
            continue
        rel = (grad - num).norm() / num.norm().clamp_min(1e-12)
        assert float(rel) < 1e-4


def test_loss_is_finite_at_tiny_temperature():
    inst = {k: v.float() for k, v in _instance(2).items()}
    out = cgh_loss(**inst, tau_s=1e-4, tau_t=1e-4, tau_h=1e-4, variant="cross")
    assert math.isfinite(float(out.loss))
