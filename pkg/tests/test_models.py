import math

import numpy as np
import pytest

from sanpeft import tensor as T
from sanpeft.errors import ConfigError, DimensionError
from sanpeft.methods import Method
from sanpeft.models import (
    attention_forward, build_reference_model, count_params, forward, layernorm_forward, linear_forward,
    model_spec, recalibration_param_count, vit_b_spec,
)


def loop_linear(w, b, x):
    out = np.zeros((x.shape[0], w.shape[0]))
    for n in range(x.shape[0]):
        for o in range(w.shape[0]):
            out[n, o] = b[o] + sum(w[o, i] * x[n, i] for i in range(w.shape[1]))
    return out


def loop_attention(wq, wk, wv, x):
    tok, d = x.shape
    proj = lambda w: [[sum(w[o, i] * x[t, i] for i in range(d)) for o in range(d)] for t in range(tok)]  # noqa: E731
    q, k, v = proj(wq), proj(wk), proj(wv)
    out = np.zeros((tok, d))
    for t in range(tok):
        logits = [sum(q[t][c] * k[s][c] for c in range(d)) / math.sqrt(d) for s in range(tok)]
        m = max(logits)
        e = [math.exp(z - m) for z in logits]
        z = sum(e)
        for c in range(d):
            out[t, c] = sum(e[s] / z * v[s][c] for s in range(tok))
    return out


def test_linear_examples(rng):
    assert linear_forward(np.eye(2), np.zeros(2), [[1.0, 2.0]]).data.tolist() == [[1.0, 2.0]]
    assert linear_forward([[1.0, 1.0]], [5.0], [[2.0, 3.0]]).data.tolist() == [[10.0]]
    w, b, x = rng.standard_normal((3, 4)), rng.standard_normal(3), rng.standard_normal((5, 4))
    assert np.abs(linear_forward(w, b, x).data - loop_linear(w, b, x)).max() < 1e-12
    with pytest.raises(DimensionError):
        linear_forward(w, b, np.ones((5, 3)))


def test_attention_examples(rng):
    v = rng.standard_normal((1, 3))
    eye = np.eye(3)
    assert np.abs(attention_forward(eye, eye, eye, v).data - v).max() < 1e-15
    two = np.repeat(rng.standard_normal((1, 3)), 2, axis=0)
    out = attention_forward(*(rng.standard_normal((3, 3)) for _ in range(3)), two).data
    assert (out[0] == out[1]).all()
    ws = [rng.standard_normal((2, 2)) for _ in range(3)]
    x = rng.standard_normal((3, 2))
    assert np.abs(attention_forward(*ws, x).data - loop_attention(*ws, x)).max() < 1e-10
    with pytest.raises(DimensionError):
        attention_forward(np.eye(3), np.eye(2), np.eye(2), np.ones((2, 2)))


def test_attention_rows_sum_to_one(rng):
    trace = {}
    x = rng.standard_normal((2, 5, 4))
    out = attention_forward(*(rng.standard_normal((4, 4)) for _ in range(3)), x, trace=trace)
    assert out.shape == x.shape
    assert np.abs(trace["attn.probs"].sum(-1) - 1).max() < 1e-12


def test_layernorm_examples(rng):
    one, zero = np.ones(3), np.zeros(3)
    assert (layernorm_forward(one, zero, [[7.0, 7.0, 7.0]]).data == 0).all()
    assert layernorm_forward(np.ones(2), np.zeros(2), [[1.0, -1.0]]).data.tolist() == [[1.0, -1.0]]
    row = layernorm_forward(np.ones(16), np.zeros(16), rng.standard_normal((1, 16)) * 5 + 3).data[0]
    assert abs(row.mean()) < 1e-12 and abs(row.var() - 1) < 1e-6


def test_reference_models_construction():
    m = build_reference_model("mlp_chain", [2, 4, 2])
    kinds = [l.kind for l in m.spec.layers]
    assert kinds == ["linear", "activation", "linear"]
    assert list(m.spec.attach_dims()) == ["fc0.out", "fc1.out"]
    v = build_reference_model("vit_toy", [4, 16, 32, 3], grid=2)
    kinds = [l.kind for l in v.spec.layers]
    assert kinds.count("attention") == 1 and kinds[0] == "embedding_patchify"
    pts = list(v.spec.attach_dims())
    assert len(pts) == len(set(pts)) and "block0.attn.v.out" in pts and "block0.ln2.out" in pts
    out = forward(v, np.zeros((3, v.spec.in_dim)))
    assert out.shape == (3, 3)


def test_same_seed_same_weights():
    a = build_reference_model("vit_toy", [4, 8, 16, 2], seed=3)
    b = build_reference_model("vit_toy", [4, 8, 16, 2], seed=3)
    assert all(a.weights[n].tobytes() == b.weights[n].tobytes() for n in a.weights)


def test_forward_is_pure(rng):
    m = build_reference_model("vit_toy", [4, 8, 16, 2], seed=1, init_std=0.3)
    x = rng.standard_normal((5, m.spec.in_dim))
    assert forward(m, x).data.tobytes() == forward(m, x).data.tobytes()


def test_invalid_dims_are_config_errors():
    with pytest.raises(ConfigError):
        build_reference_model("mlp_chain", [2])
    with pytest.raises(ConfigError):
        build_reference_model("mlp_chain", [2, 0, 2])
    with pytest.raises(ConfigError):
        build_reference_model("resnet", [2, 2])


def test_weights_are_read_only():
    m = build_reference_model("mlp_chain", [2, 3, 2])
    with pytest.raises(ValueError):
        m.weights["fc0.weight"][0, 0] = 1.0


def test_propagation_links_vit():
    links = model_spec("vit_toy", [4, 8, 16, 2]).propagation_links()
    assert links == {
        "block0.ln1.out": ["block0.attn.q", "block0.attn.k", "block0.attn.v"],
        "block0.attn.v.out": ["block0.proj"],
        "block0.ln2.out": ["block0.fc1"],
        "block0.fc1.out": ["block0.fc2"],
        "norm.out": ["head"],
    }


# -- parameter accounting ------------------------------------------------------


def test_linear_probe_counts_head_only():
    spec = model_spec("mlp_chain", [2, 4, 2])
    c = count_params(spec, Method("linear_probe"))
    assert c["trainable"] == 4 * 2 + 2 and c["total"] == (2 * 4 + 4) + 10
    v = model_spec("vit_toy", [4, 8, 16, 3])
    assert count_params(v, Method("linear_probe"))["trainable"] == 8 * 3 + 3


def test_ssf_counts_two_per_channel():
    spec = model_spec("mlp_chain", [3, 5, 5, 2])
    c = count_params(spec, "ssf")
    head = 5 * 2 + 2
    assert c["trainable"] == head + 2 * (5 + 5 + 2)


@pytest.mark.parametrize("kind,dims", [("mlp_chain", [3, 5, 7, 2]), ("vit_toy", [4, 8, 16, 3])])
def test_san_equals_ssf_plus_recalibration(kind, dims):
    spec = model_spec(kind, dims)
    san, ssf = Method("san"), Method("ssf")
    links = spec.propagation_links()
    d = spec.attach_dims()
    recal = sum(2 * d[p] for p in links)
    assert recalibration_param_count(spec, san) == recal
    assert count_params(spec, san)["trainable"] == count_params(spec, ssf)["trainable"] + recal
    modeling = Method("san", propagate=False)
    assert count_params(spec, modeling) == count_params(spec, ssf)


def test_full_finetune_is_everything():
    c = count_params(model_spec("vit_toy", [4, 8, 16, 3]), "full")
    assert c["trainable"] == c["total"] and c["ratio"] == 1.0


def test_vit_b_budget_bracket():
    spec = vit_b_spec()
    for m in ("ssf", "san"):
        assert 0.0015 <= count_params(spec, m)["ratio"] <= 0.0055


def test_count_params_errors():
    spec = model_spec("mlp_chain", [2, 4, 2])
    with pytest.raises(ConfigError):
        count_params(spec, "adapterfusion")
    with pytest.raises(ConfigError):
        count_params(spec, "lora:3")
    with pytest.raises(ConfigError):
        count_params(spec, "vpt:2")


def test_lora_counts():
    spec = model_spec("mlp_chain", [4, 6, 6, 2])
    c = count_params(spec, Method("lora", rank=2))
    added = 2 * (4 + 6) + 2 * (6 + 6)
    assert c["trainable"] == added + 6 * 2 + 2
