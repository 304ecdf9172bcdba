import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sanpeft import tensor as T
from sanpeft.adapters import make_adapter
from sanpeft.errors import ConfigError, ContractError, DimensionError
from sanpeft.models import build_reference_model, forward
from sanpeft.reparam import (
    audit_merge, gamma_deviation, gradcheck, merge_linear_transform, merge_lora, merge_model, merge_san, merge_ssf,
    perturb, san_regularizer, san_weight_mask, two_layer_closed_form,
)


def random_san(state, rng, beta=True):
    ad = make_adapter(state, "san")
    vals = {}
    for n, t in ad.parameters():
        if n.endswith((".gamma", ".recal_scale")):
            vals[n] = rng.uniform(0.5, 1.5, t.shape)
        elif n.startswith("adapter/") and (beta or not n.endswith(".beta")):
            vals[n] = 0.3 * rng.standard_normal(t.shape)
        else:
            vals[n] = t.data
    ad.load_state_dict(vals)
    return ad


def test_merge_ssf_examples(rng):
    w, b = rng.standard_normal((3, 2)), rng.standard_normal(3)
    w2, b2 = merge_ssf(w, b, np.ones(3), np.zeros(3))
    assert (w2 == w).all() and (b2 == b).all()
    w2, b2 = merge_ssf([[1.0]], [0.0], [2.0], [3.0])
    assert w2.tolist() == [[2.0]] and b2.tolist() == [3.0]
    with pytest.raises(DimensionError):
        merge_ssf(w, b, np.ones(2), np.zeros(3))


def test_merge_san_examples(rng):
    w, b = rng.standard_normal((3, 2)), rng.standard_normal(3)
    w2, b2 = merge_san(w, b, np.ones(2), np.ones(3), np.zeros(3))
    assert (w2 == w).all() and (b2 == b).all()
    w2, b2 = merge_san([[1.0]], [1.0], [2.0], [3.0], [0.0])
    assert w2.tolist() == [[6.0]] and b2.tolist() == [3.0]
    with pytest.raises(DimensionError):
        merge_san(w, b, np.ones(3), np.ones(3), np.zeros(3))


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_merge_mask_is_rank_one_outer_product(out_dim, in_dim, seed):
    r = np.random.default_rng(seed)
    w = r.standard_normal((out_dim, in_dim))
    gi, go = r.uniform(0.1, 3, in_dim), r.uniform(0.1, 3, out_dim)
    mask = san_weight_mask(gi, go)
    assert (mask == go[:, None] * gi[None, :]).all()
    assert np.linalg.matrix_rank(mask) == 1
    w2, _ = merge_san(w, np.zeros(out_dim), gi, go, np.zeros(out_dim))
    assert (w2 == w * mask).all()


def test_merge_linear_transform(rng):
    w = rng.standard_normal((3, 4))
    assert (merge_linear_transform(w, np.eye(4)) == w).all()
    g = rng.standard_normal(4)
    assert (merge_linear_transform(w, g) == merge_san(w, np.zeros(3), g, np.ones(3), np.zeros(3))[0]).all()
    t, f = rng.standard_normal((4, 4)), rng.standard_normal((6, 4))
    assert np.abs(f @ t.T @ w.T - f @ merge_linear_transform(w, t).T).max() < 1e-10
    with pytest.raises(DimensionError):
        merge_linear_transform(w, np.ones((4, 3)))


def test_merge_lora(rng):
    w, d, u = rng.standard_normal((5, 4)), rng.standard_normal((2, 4)), rng.standard_normal((5, 2))
    x = rng.standard_normal((3, 4))
    assert np.abs(x @ merge_lora(w, d, u).T - (x @ w.T + x @ d.T @ u.T)).max() < 1e-12


def test_two_layer_closed_form_examples(rng):
    w, b, x = rng.standard_normal((2, 3)), rng.standard_normal(2), rng.standard_normal((4, 3))
    assert np.abs(two_layer_closed_form(w, b, x, np.ones(3), np.ones(2)) - (x @ w.T + b)).max() < 1e-15
    assert two_layer_closed_form([[1.0]], [0.0], [1.0], [2.0], [1.0]).tolist() == [4.0]


def test_regularizer_examples():
    assert san_regularizer([T.Tensor(np.ones(3))], 0.7).item() == 0.0
    assert san_regularizer([T.Tensor([2.0, 0.0])], 0.5).item() == 1.0
    with pytest.raises(ConfigError):
        san_regularizer([T.Tensor([1.0])], -0.1)


def test_regularizer_gradient(rng):
    g = T.Tensor(rng.standard_normal(5), requires_grad=True)
    T.backward(san_regularizer([g], 0.3))
    assert np.abs(g.grad - 2 * 0.3 * (g.data - 1)).max() < 1e-12
    num = T.finite_diff_grad(lambda t: san_regularizer([t], 0.3), g.data).data
    assert np.abs(g.grad - num).max() < 1e-6


@given(st.lists(st.floats(-3, 3), min_size=1, max_size=6), st.floats(0, 5))
def test_regularizer_properties(values, lam):
    g = [T.Tensor(values)]
    r = san_regularizer(g, lam).item()
    assert r >= 0
    assert abs(r - lam * gamma_deviation(g)) <= 1e-12 * max(1.0, r)
    if all(v == 1.0 for v in values) or lam == 0:
        assert r == 0
    elif lam > 0:
        assert r > 0


@pytest.mark.parametrize("method", ["ssf", "san", "lora:2", "bitfit", "full", "linear_probe"])
def test_linear_chain_merge_is_exact(method, rng):
    state = build_reference_model("mlp_chain", [4, 5, 6, 3], seed=1, init_std=0.5, activation="identity")
    ad = perturb(make_adapter(state, method), scale=0.3, seed=2)
    merged = merge_model(state, ad)
    report = audit_merge((state, ad), merged)
    assert report.tolerance_class == "exact" and report.verdict == "exact" and report.passed
    assert report.params["trainable_after"] == 0 and report.probe["count"] == 64


@pytest.mark.parametrize("method", ["ssf", "san", "san-propagation", "lora:2"])
def test_vit_merge_is_report_only(method):
    state = build_reference_model("vit_toy", [4, 8, 16, 3], seed=1, init_std=0.5)
    ad = perturb(make_adapter(state, method), scale=0.3, seed=2)
    report = audit_merge((state, ad), merge_model(state, ad))
    assert report.tolerance_class == "report-only"
    assert report.passed and report.max_deviation < 1e-10  # folding acts on weights, so this one is exact too
    assert "block0.attn" in report.per_layer


def test_identity_adapters_audit_zero():
    state = build_reference_model("mlp_chain", [3, 4, 2], seed=1, activation="identity")
    ad = make_adapter(state, "san")
    report = audit_merge((state, ad), merge_model(state, ad))
    assert report.max_deviation == 0.0 and report.verdict == "exact"


def test_audit_detects_mismatch(rng):
    state = build_reference_model("mlp_chain", [3, 4, 2], seed=1, activation="identity")
    ad = random_san(state, rng)
    report = audit_merge((state, ad), state)
    assert report.verdict == "mismatch" and not report.passed


def test_audit_spec_mismatch_is_contract_error():
    a = build_reference_model("mlp_chain", [3, 4, 2])
    b = build_reference_model("mlp_chain", [3, 5, 2])
    with pytest.raises(ContractError):
        audit_merge(a, b)


def test_unfoldable_methods_refuse_to_merge():
    state = build_reference_model("vit_toy", [4, 8, 16, 3])
    with pytest.raises(ConfigError):
        merge_model(state, make_adapter(state, "vpt:1"))
    lora = make_adapter(state, {"kind": "lora", "rank": 2, "phi": "relu"})
    with pytest.raises(ConfigError):
        merge_model(state, lora)


def test_full_recalibration_merges(rng):
    state = build_reference_model("mlp_chain", [3, 4, 4, 2], seed=1, init_std=0.5, activation="identity")
    ad = perturb(make_adapter(state, {"kind": "san", "recal": "full"}), scale=0.3, seed=5)
    assert ad.params["fc0.out.recal_scale"].shape == (4, 4)
    assert audit_merge((state, ad), merge_model(state, ad)).verdict == "exact"


def test_gradcheck_mlp(rng):
    state = build_reference_model("mlp_chain", [3, 4, 4, 2], seed=1, init_std=0.5)
    ad = perturb(make_adapter(state, "san"), scale=0.3, seed=1)
    x, y = rng.standard_normal((4, 3)), rng.integers(0, 2, 4)
    errs = gradcheck(state, ad, x, y, lam=0.1)
    assert set(errs) == {n for n, _ in ad.parameters()}
    assert max(errs.values()) < 1e-4


def test_merged_state_is_plain(rng):
    state = build_reference_model("vit_toy", [4, 8, 16, 3], seed=1)
    ad = perturb(make_adapter(state, "san"), scale=0.3, seed=2)
    merged = merge_model(state, ad)
    assert set(merged.weights) == set(state.weights)
    x = rng.standard_normal((2, state.spec.in_dim))
    assert forward(merged, x).shape == (2, 3)
