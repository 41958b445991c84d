import math

import numpy as np
import pytest

from quacklab.attention import MlaWeights, mha_logits, mla_logit_parts
from quacklab.interventions import (ClipState, DegenerateWeightError, Intervention,
                                    InterventionKind, Policy, ablation_lrs, clip_gamma,
                                    logit_weight_names, mla_lr_factors, qk_clip, quack_init_mha,
                                    quack_init_mla, quack_step_mha, quack_step_mla)
from quacklab.lemma import mla_rates
from quacklab.model import init_params
from quacklab.norms import NormKind, frobenius_norm, spectral_norm
from quacklab.tensor import Tensor

from conftest import small_model_config


def unit(rng, shape, norm=1.0, name=None):
    a = rng.standard_normal(shape)
    return Tensor(a * norm / np.linalg.norm(a), name=name)


def mla_with_norms(rng, n_head=1, **norms):
    """MLA weights whose Frobenius norms are given (default 1)."""
    def t(fam, shape, h=None):
        name = f"{fam}" if h is None else f"{fam}.{h}"
        key = fam if h is None else f"{fam}{h}"
        return unit(rng, shape, norms.get(key, norms.get(fam, 1.0)), name)

    heads = range(n_head)
    return MlaWeights(
        w_dq=t("w_dq", (6, 4)), w_dkv=t("w_dkv", (6, 4)), w_kr=t("w_kr", (6, 2)),
        w_uq=[t("w_uq", (4, 3), h) for h in heads], w_qr=[t("w_qr", (4, 2), h) for h in heads],
        w_uk=[t("w_uk", (4, 3), h) for h in heads], w_uv=[t("w_uv", (4, 5), h) for h in heads],
        wo=unit(rng, (5 * n_head, 6), name="wo"))


# ---------------------------------------------------------------------------
# MHA


def test_quack_mha_init_records_norms():
    params = init_params(small_model_config(), 0)
    plan = quack_init_mha(params)
    for name in logit_weight_names(params):
        assert plan.init[name] == frobenius_norm(params[name].data)
    again = quack_init_mha(params)
    assert again.init == plan.init
    spectral = quack_init_mha(params, NormKind.SPECTRAL)
    name = "layers.1.attn.wk.0"
    assert spectral.init[name] == spectral_norm(params[name].data)


def test_quack_mha_first_step_is_tau_eta():
    params = init_params(small_model_config(), 0)
    plan = quack_init_mha(params)
    lrs = quack_step_mha(params, plan, 0.1, 0.03)
    for name in params.names():
        expected = 0.1 * 0.03 if name in logit_weight_names(params) else 0.03
        assert lrs[name] == pytest.approx(expected, rel=1e-15)


def test_quack_mha_partner_doubling_halves_rate():
    params = init_params(small_model_config(), 0)
    plan = quack_init_mha(params)
    params["layers.0.attn.wk.1"].data *= 2
    lrs = quack_step_mha(params, plan, 1.0, 1.0)
    assert lrs["layers.0.attn.wq.1"] == pytest.approx(0.5, rel=1e-14)
    assert lrs["layers.0.attn.wk.1"] == pytest.approx(1.0, rel=1e-14)
    assert lrs["layers.0.attn.wq.0"] == pytest.approx(1.0, rel=1e-14)


def test_quack_mha_constancy_identity(rng):
    params = init_params(small_model_config(), 0)
    plan = quack_init_mha(params)
    for _ in range(5):
        for name in logit_weight_names(params):
            params[name].data *= rng.uniform(0.3, 3.0)
        eta = rng.uniform(1e-4, 1e-1)
        lrs = quack_step_mha(params, plan, 0.1, eta)
        for layer in range(2):
            for h in range(2):
                q, k = f"layers.{layer}.attn.wq.{h}", f"layers.{layer}.attn.wk.{h}"
                lhs = lrs[q] * frobenius_norm(params[k].data)
                assert lhs == pytest.approx(0.1 * eta * plan.init[k], rel=1e-12)


def test_quack_degenerate_weight_raises():
    params = init_params(small_model_config(), 0)
    params["layers.0.attn.wk.0"].data[:] = 0
    with pytest.raises(DegenerateWeightError):
        quack_init_mha(params)


# ---------------------------------------------------------------------------
# MLA factors


def test_mla_factors_all_one(rng):
    f = mla_lr_factors(mla_with_norms(rng))
    assert all(v == pytest.approx(1.0, rel=1e-14) for v in f.values())


def test_mla_factors_dkv_two(rng):
    w = mla_with_norms(rng, w_dkv=2.0)
    f = mla_lr_factors(w)
    assert f["w_uq.0"] == pytest.approx(0.5, rel=1e-14)
    assert f["w_qr.0"] == pytest.approx(1.0, rel=1e-14)


def test_mla_dq_factor_takes_smaller_branch(rng):
    # nope branch product 2*2*2 = 8, rope branch product 2*1 = 2
    w = mla_with_norms(rng, w_uq=2.0, w_uk=2.0, w_dkv=2.0, w_qr=2.0)
    nope = 1 / (2.0 * 2.0 * 2.0)
    rope = 1 / (2.0 * 1.0)
    assert mla_lr_factors(w)["w_dq"] == pytest.approx(min(nope, rope), rel=1e-14)
    assert mla_lr_factors(w)["w_dq"] == pytest.approx(1 / 8, rel=1e-14)


def single_head_rates(w, tau):
    """The single-head learning rates written out directly."""
    n = frobenius_norm
    dq, dkv, kr = n(w.w_dq.data), n(w.w_dkv.data), n(w.w_kr.data)
    uq, uk, qr = n(w.w_uq[0].data), n(w.w_uk[0].data), n(w.w_qr[0].data)
    return {"w_uq.0": tau / (dq * uk * dkv),
            "w_dq": tau * min(1 / (uq * uk * dkv), 1 / (qr * kr)),
            "w_qr.0": tau / (dq * kr),
            "w_uk.0": tau / (uq * dq * dkv),
            "w_dkv": tau / (uq * dq * uk),
            "w_kr": tau / (qr * dq)}


def test_multi_head_rules_reduce_to_single_head(rng):
    for _ in range(20):
        scales = {k: float(np.exp(rng.uniform(-2, 2)))
                  for k in ("w_dq", "w_dkv", "w_kr", "w_uq", "w_uk", "w_qr")}
        w = mla_with_norms(rng, **scales)
        got = mla_lr_factors(w)
        for name, value in single_head_rates(w, 0.3).items():
            assert 0.3 * got[name] == pytest.approx(value, rel=1e-13)


def test_mla_factor_rules_agree_with_lemma_rates(rng):
    w = mla_with_norms(rng, n_head=3, w_uq0=0.5, w_uk2=3.0, w_qr1=2.0, w_dq=1.5)
    f = mla_lr_factors(w)
    n = frobenius_norm
    norms = {"dq": n(w.w_dq.data), "dkv": n(w.w_dkv.data), "kr": n(w.w_kr.data),
             "uq": [n(t.data) for t in w.w_uq], "uk": [n(t.data) for t in w.w_uk],
             "qr": [n(t.data) for t in w.w_qr]}
    rates = mla_rates(norms, 1.0)
    for fam in ("dq", "dkv", "kr"):
        assert f[f"w_{fam}"] == pytest.approx(rates[fam], rel=1e-14)
    for fam in ("uq", "uk", "qr"):
        for h in range(3):
            assert f[f"w_{fam}.{h}"] == pytest.approx(rates[fam][h], rel=1e-14)


def test_quack_mla_step_zero_and_dq_doubling(rng):
    params = init_params(small_model_config("mla"), 0)
    plan = quack_init_mla(params)
    lrs = quack_step_mla(params, plan, 0.1, 0.02)
    names = logit_weight_names(params)
    assert len(names) == 2 * (3 * 2 + 3)
    for name in params.names():
        expected = 0.1 * 0.02 if name in names else 0.02
        assert lrs[name] == pytest.approx(expected, rel=1e-14)
    params["layers.0.attn.w_dq"].data *= 2
    lrs = quack_step_mla(params, plan, 0.1, 0.02)
    assert lrs["layers.0.attn.w_uk.1"] == pytest.approx(0.5 * 0.1 * 0.02, rel=1e-14)
    assert lrs["layers.1.attn.w_uk.1"] == pytest.approx(0.1 * 0.02, rel=1e-14)
    assert lrs["layers.0.attn.w_uv.1"] == 0.02


# ---------------------------------------------------------------------------
# ablation and clip


def test_ablation_map():
    params = init_params(small_model_config("mla"), 0)
    lrs = ablation_lrs(params, 0.1, 0.02)
    assert lrs == ablation_lrs(params, 0.1, 0.02)
    quack = quack_step_mla(params, quack_init_mla(params), 0.1, 0.02)
    assert all(lrs[n] == pytest.approx(quack[n], rel=1e-14) for n in params.names())
    plain = ablation_lrs(params, 1.0, 0.02)
    assert all(v == 0.02 for v in plain.values())


def test_clip_gamma_examples():
    assert clip_gamma(200.0, 100.0) == 0.5
    assert clip_gamma(50.0, 100.0) == 1.0
    assert clip_gamma(-3.0, 100.0) == 1.0


def test_mha_clip_scales_by_root_gamma_and_resets(rng):
    params = init_params(small_model_config(), 0)
    w = params.attention(1)
    before = w.wq[0].data.copy(), w.wk[0].data.copy(), w.wq[1].data.copy()
    clip = ClipState(100.0)
    clip.observe({(1, 0): 200.0, (1, 1): 50.0})
    gammas = qk_clip([params.attention(0), w], clip)
    assert gammas == {(1, 0): 0.5, (1, 1): 1.0}
    np.testing.assert_allclose(w.wq[0].data, before[0] * math.sqrt(0.5), rtol=1e-15)
    np.testing.assert_allclose(w.wk[0].data, before[1] * math.sqrt(0.5), rtol=1e-15)
    assert np.array_equal(w.wq[1].data, before[2])
    assert clip.s_max == {}


def test_clip_postcondition_mha(rng):
    params = init_params(small_model_config(), 0)
    w, cfg = params.attention(0), params.cfg.attention
    x = rng.standard_normal((6, cfg.d_model)) * 4
    mask = np.tril(np.ones((6, 6), dtype=bool))
    s_max = mha_logits(x, x, w, cfg, 1).data[mask].max()
    clip = ClipState(0.25 * s_max)
    clip.observe({(0, 1): s_max})
    qk_clip(w, clip)
    after = mha_logits(x, x, w, cfg, 1).data[mask].max()
    assert after <= clip.tau_clip * (1 + 1e-6)
    assert after == pytest.approx(0.25 * s_max, rel=1e-12)


def test_clip_mla_parts_scale_by_gamma(rng):
    params = init_params(small_model_config("mla"), 0)
    w, cfg = params.attention(0), params.cfg.attention
    kr = w.w_kr.data.copy()
    x = rng.standard_normal((5, cfg.d_model))
    nope, rope = mla_logit_parts(x, w, cfg, 0)
    clip = ClipState(10.0)
    clip.observe({(0, 0): 40.0})
    qk_clip(w, clip)
    nope2, rope2 = mla_logit_parts(x, w, cfg, 0)
    np.testing.assert_allclose(nope2, 0.25 * nope, atol=1e-10)
    np.testing.assert_allclose(rope2, 0.25 * rope, atol=1e-10)
    assert np.array_equal(w.w_kr.data, kr)


def test_policy_dispatch():
    params = init_params(small_model_config(), 0)
    none = Policy(Intervention(), params)
    assert set(none.lr_map(params, 0.01).values()) == {0.01}
    assert none.after_step(params) == {}
    quack = Policy(Intervention(InterventionKind.QUACK, tau=1.0), params)
    assert quack.lr_map(params, 0.01) == none.lr_map(params, 0.01)
    clip = Policy(Intervention(InterventionKind.QK_CLIP, tau_clip=1e-9), params)
    clip.observe({(0, 0): 1.0})
    assert clip.after_step(params)[(0, 0)] == pytest.approx(1e-9)
