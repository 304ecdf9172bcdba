"""Folding adapters into base weights and auditing the result.

Merges work on plain float64 numpy arrays.  ``merge_model`` turns an
adapted model into a plain ``ModelState`` with the original architecture;
``audit_merge`` compares the two forwards on a seeded probe batch.
"""
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .adapters import SAN, SSF, VPT, LoRA, make_adapter
from .errors import ConfigError, ContractError, DimensionError
from .models import forward

EXACT_TOL = 1e-10


def _vec(v, n, what):
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (n,):
        raise DimensionError(f"{what}: expected length {n}, got shape {v.shape}")
    return v


def merge_ssf(w, b, gamma, beta):
    """Fold ``gamma * (w x + b) + beta`` into ``(w', b')``."""
    w = np.asarray(w, dtype=np.float64)
    b = _vec(b, w.shape[0], "bias")
    gamma = _vec(gamma, w.shape[0], "gamma")
    beta = _vec(beta, w.shape[0], "beta")
    return gamma[:, None] * w, gamma * b + beta


def san_weight_mask(gamma_in, gamma_out):
    """Rank-1 multiplicative mask ``gamma_out gamma_in^T``."""
    return np.outer(np.asarray(gamma_out, dtype=np.float64), np.asarray(gamma_in, dtype=np.float64))


def merge_san(w, b, gamma_in, gamma_out, beta_out):
    """Fold a propagated input factor and an output scale/shift into one layer.

    ``gamma_in`` is the recalibrated factor of the upstream attach point
    (input columns); ``gamma_out`` / ``beta_out`` belong to this layer's
    own attach point (output rows).
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise DimensionError(f"weight must be 2-D, got {w.shape}")
    out_dim, in_dim = w.shape
    gamma_in = _vec(gamma_in, in_dim, "incoming factor")
    gamma_out = _vec(gamma_out, out_dim, "gamma")
    beta_out = _vec(beta_out, out_dim, "beta")
    b = _vec(b, out_dim, "bias")
    return w * san_weight_mask(gamma_in, gamma_out), gamma_out * b + beta_out


def merge_linear_transform(w, t):
    """``W' = W T`` for a feature transform ``T`` (vector = diagonal)."""
    w = np.asarray(w, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 1:
        if t.shape[0] != w.shape[1]:
            raise DimensionError(f"diagonal transform of length {t.shape[0]} vs weight {w.shape}")
        return w * t
    if t.ndim != 2 or t.shape[0] != t.shape[1]:
        raise DimensionError(f"transform must be square, got {t.shape}")
    if t.shape[0] != w.shape[1]:
        raise DimensionError(f"transform {t.shape} vs weight {w.shape}")
    return w @ t


def merge_lora(w, w_down, w_up):
    """Fold a linear (identity-phi) low-rank branch: ``W' = W + W_up W_down``."""
    w = np.asarray(w, dtype=np.float64)
    w_down = np.asarray(w_down, dtype=np.float64)
    w_up = np.asarray(w_up, dtype=np.float64)
    if w_down.shape[1] != w.shape[1] or w_up.shape[0] != w.shape[0] or w_up.shape[1] != w_down.shape[0]:
        raise DimensionError(f"lora factors {w_down.shape}/{w_up.shape} vs weight {w.shape}")
    return w + w_up @ w_down


def two_layer_closed_form(w, b, x, gamma_l, gamma_next):
    """Output of the second layer of a bias-interleaved linear pair.

    ``(gamma_next * gamma_l * gamma_l * w) x + gamma_next * b`` where ``x``
    is the unscaled output of the first layer, ``gamma_l`` its factor
    (applied once to the feature and once propagated into ``w``).
    """
    w = np.asarray(w, dtype=np.float64)
    out_dim, in_dim = w.shape
    gamma_l = _vec(gamma_l, in_dim, "gamma_l")
    gamma_next = _vec(gamma_next, out_dim, "gamma_next")
    b = _vec(b, out_dim, "bias")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != in_dim:
        raise DimensionError(f"x {x.shape} vs weight {w.shape}")
    w_eff = gamma_next[:, None] * (gamma_l * gamma_l) * w
    return x @ w_eff.T + gamma_next * b


def san_regularizer(gammas, lam):
    """``lam * sum_l ||gamma_l - 1||^2`` as a differentiable scalar."""
    if lam < 0:
        raise ConfigError(f"regularization strength must be >= 0, got {lam}")
    total = None
    for g in gammas:
        dev = T.sub(T.as_tensor(g), 1.0)
        term = T.tsum(T.mul(dev, dev))
        total = term if total is None else T.add(total, term)
    if total is None:
        return T.Tensor(0.0)
    return T.mul(total, float(lam))


def gamma_deviation(gammas):
    """``sum_l ||gamma_l - 1||^2`` as a float."""
    return float(sum(((np.asarray(T.as_tensor(g).data, dtype=np.float64) - 1.0) ** 2).sum() for g in gammas))


# ---------------------------------------------------------------------------
# whole-model merge
# ---------------------------------------------------------------------------


def _data(t):
    return np.asarray(t.data, dtype=np.float64) if t is not None else None


def merge_model(state, adapter):
    """Plain ``ModelState`` computing the same function as ``state`` + ``adapter``."""
    if adapter is None:
        return state
    trained = adapter.trained_base(state)
    if isinstance(adapter, VPT):
        if adapter.block.n:
            raise ConfigError("prompt tokens extend the sequence and cannot be folded into weights")
        return trained
    weights = {n: np.array(a, dtype=np.float64) for n, a in trained.weights.items()}
    spec = state.spec
    if isinstance(adapter, LoRA):
        if adapter.method.phi != "identity":
            raise ConfigError(f"lora with phi={adapter.method.phi} is not foldable")
        for key, pair in adapter.pairs.items():
            weights[f"{key}.weight"] = merge_lora(weights[f"{key}.weight"], _data(pair.w_down), _data(pair.w_up))
        return trained.replace(weights)
    if not isinstance(adapter, (SSF, SAN)):
        return trained

    with T.no_grad():
        col = {}
        if isinstance(adapter, SAN):
            from .adapters import recalibrate

            for key, p in adapter.consumer.items():
                col[key] = _data(recalibrate(adapter.points[p]))

    def out_factors(point, dim):
        a = adapter.points[point]
        if isinstance(adapter, SAN) and not a.modeling:
            return np.ones(dim), _data(a.beta)
        return _data(a.gamma), _data(a.beta)

    for layer in spec.layers:
        n = layer.name
        if layer.kind in ("linear", "embedding_patchify"):
            pairs = [(n, f"{n}.out")]
        elif layer.kind == "attention":
            pairs = [(f"{n}.{p}", f"{n}.{p}.out") for p in "qkv"]
        elif layer.kind == "layernorm":
            g, bt = out_factors(f"{n}.out", layer.out_dim)
            weights[f"{n}.gain"], weights[f"{n}.bias"] = g * weights[f"{n}.gain"], g * weights[f"{n}.bias"] + bt
            continue
        else:
            continue
        for key, point in pairs:
            w, b = weights[f"{key}.weight"], weights[f"{key}.bias"]
            g, bt = out_factors(point, layer.out_dim)
            gin = col.get(key, np.ones(w.shape[1]))
            weights[f"{key}.weight"], weights[f"{key}.bias"] = merge_san(w, b, gin, g, bt)
    return trained.replace(weights)


def is_linear_only(spec):
    for layer in spec.layers:
        if layer.kind in ("layernorm", "attention", "embedding_patchify"):
            return False
        if layer.kind == "activation" and layer.activation != "identity":
            return False
    return True


@dataclass
class MergeReport:
    method: str
    per_layer: dict
    max_deviation: float
    probe: dict
    tolerance_class: str
    verdict: str
    params: dict = field(default_factory=dict)
    schema: str = "sanpeft.merge_report/1"

    @property
    def passed(self):
        return self.verdict != "mismatch"

    def to_dict(self):
        return asdict(self)


def probe_batch(in_dim, seed=0, count=64):
    return np.random.default_rng(seed).standard_normal((count, in_dim))


def audit_merge(adapted, merged, probe_seed=0, probe_count=64, tol=EXACT_TOL):
    """Compare an adapted model ``(state, adapter)`` with its merged form.

    Linear-only chains get the asserted ``exact`` class; anything with a
    nonlinearity, normalization or attention is ``report-only``.
    """
    if isinstance(adapted, tuple):
        state, adapter = adapted
    else:
        state, adapter = adapted, None
    if state.spec.to_dict() != merged.spec.to_dict():
        raise ContractError("adapted and merged models have different specs")
    state64, merged64 = state.astype(np.float64), merged.astype(np.float64)
    if adapter is not None and adapter.dtype != np.float64:
        a64 = make_adapter(state64, adapter.method)
        a64.load_state_dict(adapter.state_dict())
        adapter = a64
    x = probe_batch(state.spec.in_dim, probe_seed, probe_count)
    ta, tm = {}, {}
    with T.no_grad():
        out_a = forward(state64, x, hooks=adapter, trace=ta).data
        out_m = forward(merged64, x, hooks=None, trace=tm).data
    per_layer = {}
    for name in tm:
        if name in ta and ta[name].shape == tm[name].shape:
            per_layer[name] = float(np.abs(ta[name] - tm[name]).max())
    dev = float(np.abs(out_a - out_m).max())
    cls = "exact" if is_linear_only(state.spec) else "report-only"
    if dev < tol:
        verdict = "exact"
    else:
        verdict = "mismatch" if cls == "exact" else "approximate"
    before = adapter.num_trainable() if adapter is not None else 0
    params = {
        "trainable_before": before,
        "trainable_after": 0,
        "total_before": state.num_params() + (sum(t.data.size for t in adapter.params.values()) if adapter else 0),
        "total_after": merged.num_params(),
    }
    return MergeReport(
        method=adapter.method.label if adapter is not None else "none",
        per_layer=per_layer,
        max_deviation=dev,
        probe={"seed": probe_seed, "count": probe_count, "distribution": "standard_normal"},
        tolerance_class=cls,
        verdict=verdict,
        params=params,
    )


# ---------------------------------------------------------------------------
# gradient audit
# ---------------------------------------------------------------------------


def perturb(adapter, scale=0.1, seed=0):
    """Move every trainable tensor off its initial value (for generic gradients)."""
    rng = np.random.default_rng(seed)
    values = {n: t.data + scale * rng.standard_normal(t.shape) for n, t in adapter.parameters()}
    adapter.load_state_dict(values)
    return adapter


def adapter_loss(state, adapter, x, y, lam=0.0):
    loss = T.cross_entropy(adapter(state, x), y)
    if lam:
        loss = T.add(loss, san_regularizer(adapter.gammas(), lam))
    return loss


def gradcheck(state, adapter, x, y, eps=1e-5, lam=0.0, floor=1e-6):
    """Analytic vs central-difference gradients for every trainable tensor.

    Returns ``{qualified name: max relative error}``; relative error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    params = adapter.parameters()
    T.zero_grads([t for _, t in params])
    T.backward(adapter_loss(state, adapter, x, y, lam))
    errors = {}
    for name, p in params:
        original = p.data

        def f(t, p=p):
            p.data = t.data
            return adapter_loss(state, adapter, x, y, lam)

        try:
            numeric = T.finite_diff_grad(f, T.Tensor(original), eps).data
        finally:
            p.data = original
        errors[name] = T.relative_error(p.grad, numeric, floor)
    return errors
