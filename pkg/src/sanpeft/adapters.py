"""PEFT adapters: SSF, LoRA, prompt tuning, SAN and partial tuning.

Each adapter is a set of forward hooks over a frozen ``ModelState`` plus
its own trainable tensors.  Every adapter is the identity map at
initialization (prompt tuning only when it has zero prompts).

SAN attaches a (gamma, beta) pair to every attach point like SSF, and
additionally multiplies the input columns of the next weight matrix by
the recalibrated factor ``gamma' = A * gamma + b``.
"""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .methods import Method
from .models import BaseHooks, adapter_param_shapes, forward, trainable_base_names


@dataclass
class ScaleShift:
    gamma: T.Tensor
    beta: T.Tensor


def ssf_apply(a, y):
    """``gamma * y + beta`` over the last axis."""
    y = T.as_tensor(y)
    if a.gamma.shape != (y.shape[-1],) or a.beta.shape != (y.shape[-1],):
        raise DimensionError(f"ssf: gamma {a.gamma.shape} / beta {a.beta.shape} vs features {y.shape}")
    return T.add(T.mul(y, a.gamma), a.beta)


@dataclass
class LoraPair:
    w_down: T.Tensor
    w_up: T.Tensor
    phi: str = "identity"

    @property
    def rank(self):
        return self.w_down.shape[0]


def lora_apply(a, x, base_out):
    """``base_out + phi(x @ w_down.T) @ w_up.T``."""
    x, base_out = T.as_tensor(x), T.as_tensor(base_out)
    r, d_in = a.w_down.shape
    d_out = a.w_up.shape[0]
    if a.w_up.shape != (d_out, r) or x.shape[-1] != d_in or base_out.shape[-1] != d_out:
        raise DimensionError(
            f"lora: x {x.shape}, w_down {a.w_down.shape}, w_up {a.w_up.shape}, base_out {base_out.shape}"
        )
    if r > min(d_in, d_out):
        raise ConfigError(f"lora rank {r} exceeds layer dims {d_in}->{d_out}")
    hidden = T.ACTIVATIONS[a.phi](T.matmul(x, T.transpose(a.w_down)))
    return T.add(base_out, T.matmul(hidden, T.transpose(a.w_up)))


@dataclass
class PromptBlock:
    p: T.Tensor = None  # [n, d]; None means n = 0

    @property
    def n(self):
        return 0 if self.p is None else self.p.shape[0]


def vpt_concat(a, x):
    """Append the prompt tokens after the input tokens: ``[x; p]``."""
    x = T.as_tensor(x)
    if a.p is None:
        return x
    if a.p.shape[-1] != x.shape[-1]:
        raise DimensionError(f"vpt: prompts {a.p.shape} vs tokens {x.shape}")
    p = a.p if x.ndim == 2 else T.expand(a.p, x.shape[:-2])
    return T.concat([x, p], axis=-2)


@dataclass
class SanAdapter:
    gamma: T.Tensor = None
    beta: T.Tensor = None
    recal_scale: T.Tensor = None
    recal_shift: T.Tensor = None
    modeling: bool = True
    propagate: bool = True


def recalibrate(a):
    """``gamma' = A * gamma + b`` (A diagonal, or a full matrix when 2-D)."""
    g = a.gamma
    if a.recal_scale is None or a.recal_shift is None:
        raise ConfigError("recalibrate needs recal_scale and recal_shift")
    if a.recal_scale.ndim == 2:
        d = g.shape[0]
        if a.recal_scale.shape != (d, d):
            raise DimensionError(f"recal_scale {a.recal_scale.shape} vs gamma {g.shape}")
        scaled = T.reshape(T.matmul(a.recal_scale, T.reshape(g, (d, 1))), (d,))
    else:
        if a.recal_scale.shape != g.shape:
            raise DimensionError(f"recal_scale {a.recal_scale.shape} vs gamma {g.shape}")
        scaled = T.mul(g, a.recal_scale)
    if a.recal_shift.shape != g.shape:
        raise DimensionError(f"recal_shift {a.recal_shift.shape} vs gamma {g.shape}")
    return T.add(scaled, a.recal_shift)


# ---------------------------------------------------------------------------
# method-level adapters
# ---------------------------------------------------------------------------


def _param(arr, name, dtype):
    return T.Tensor(arr, requires_grad=True, name=name, dtype=dtype)


class Adapter(BaseHooks):
    """Trainable state and hooks for one method over one model spec.

    ``base`` holds trainable copies of base weights the method releases
    (the head for every PEFT method, biases for BitFit, all for full
    fine-tuning); ``params`` holds the tensors the method adds.
    """

    def __init__(self, state, method, seed=0):
        if not isinstance(method, Method):
            method = Method.from_dict(method)
        self.method = method
        self.spec = state.spec
        self.dtype = state.dtype
        self.base = {n: _param(state.weights[n], n, self.dtype) for n in trainable_base_names(self.spec, method)}
        rng = np.random.default_rng(seed)
        self.params = {}
        for name, shape in adapter_param_shapes(self.spec, method):
            self.params[name] = _param(self._init_value(name, shape, rng), name, self.dtype)
        self._build()

    def _init_value(self, name, shape, rng):
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("gamma", "recal_scale"):
            return np.eye(shape[0]) if len(shape) == 2 else np.ones(shape)
        return np.zeros(shape)

    def _build(self):
        pass

    # hooks -----------------------------------------------------------------

    def param(self, state, name):
        t = self.base.get(name)
        return t if t is not None else state.tensor(name)

    def __call__(self, state, x, trace=None):
        return forward(state, x, hooks=self, trace=trace)

    # state -----------------------------------------------------------------

    def parameters(self):
        """Ordered ``[(qualified name, tensor)]`` of everything trainable."""
        return [(f"base/{n}", t) for n, t in self.base.items()] + [
            (f"adapter/{n}", t) for n, t in self.params.items()
        ]

    def state_dict(self):
        return {n: t.data.copy() for n, t in self.parameters()}

    def load_state_dict(self, values):
        own = dict(self.parameters())
        extra = set(values) - set(own)
        missing = set(own) - set(values)
        if extra or missing:
            raise ConfigError(
                f"adapter state mismatch; missing: {sorted(missing)}, unexpected: {sorted(extra)}"
            )
        for n, t in own.items():
            arr = np.asarray(values[n], dtype=self.dtype)
            if arr.shape != t.shape:
                raise DimensionError(f"{n}: expected {t.shape}, got {arr.shape}")
            t.data = np.ascontiguousarray(arr)
        self._build()

    def num_trainable(self):
        return sum(t.data.size for _, t in self.parameters())

    def gammas(self):
        return [t for n, t in self.params.items() if n.endswith(".gamma")]

    def trained_base(self, state):
        """``state`` with the released base weights replaced by their trained values."""
        return state.replace({n: t.data for n, t in self.base.items()})


class PartialTuning(Adapter):
    """Linear probing, BitFit, full fine-tuning (or nothing): no added tensors."""


class SSF(Adapter):
    def _build(self):
        dims = self.spec.attach_dims()
        self.points = {p: ScaleShift(self.params[f"{p}.gamma"], self.params[f"{p}.beta"]) for p in dims}

    def attach(self, point, y):
        return ssf_apply(self.points[point], y)


class LoRA(Adapter):
    def _init_value(self, name, shape, rng):
        if name.endswith(".w_down"):
            return rng.normal(0.0, 1.0 / np.sqrt(shape[1]), size=shape)
        return np.zeros(shape)

    def _build(self):
        self.pairs = {
            k: LoraPair(self.params[f"{k}.w_down"], self.params[f"{k}.w_up"], self.method.phi)
            for k in self.spec.lora_targets()
        }

    def extra(self, key, x, out):
        pair = self.pairs.get(key)
        return out if pair is None else lora_apply(pair, x, out)


class VPT(Adapter):
    def _init_value(self, name, shape, rng):
        return rng.normal(0.0, 0.02, size=shape)

    def _build(self):
        self.block = PromptBlock(self.params.get("prompts"))

    def embed(self, h):
        return vpt_concat(self.block, h)

    def before_head(self, h, tokens):
        if self.block.n == 0:
            return h
        return T.slice_axis(h, 0, tokens, axis=1)


class SAN(Adapter):
    def _build(self):
        m = self.method
        links = self.spec.propagation_links() if m.propagate else {}
        self.points = {}
        for p in self.spec.attach_dims():
            g = lambda leaf: self.params.get(f"{p}.{leaf}")  # noqa: E731
            self.points[p] = SanAdapter(
                gamma=g("gamma"),
                beta=g("beta"),
                recal_scale=g("recal_scale"),
                recal_shift=g("recal_shift"),
                modeling=m.modeling,
                propagate=p in links,
            )
        self.consumer = {key: p for p, keys in links.items() for key in keys}

    @classmethod
    def from_points(cls, state, points, modeling=True, propagate=True, recal="diagonal"):
        """Build from explicit per-attach-point ``SanAdapter`` records."""
        dims = state.spec.attach_dims()
        if isinstance(points, (list, tuple)):
            if len(points) != len(dims):
                raise ConfigError(f"{len(points)} SAN adapters for {len(dims)} attach points")
            points = dict(zip(dims, points))
        if set(points) != set(dims):
            raise ConfigError(f"SAN adapters do not match attach points: {sorted(set(points) ^ set(dims))}")
        self = cls(state, Method("san", modeling=modeling, propagate=propagate, recal=recal))
        values = {}
        for p, a in points.items():
            for leaf in ("gamma", "beta", "recal_scale", "recal_shift"):
                key = f"adapter/{p}.{leaf}"
                t = getattr(a, leaf)
                if t is not None and f"{p}.{leaf}" in self.params:
                    values[key] = T.as_tensor(t).data
        for n, t in self.parameters():
            values.setdefault(n, t.data)
        self.load_state_dict(values)
        return self

    def attach(self, point, y):
        a = self.points[point]
        if a.modeling:
            y = T.mul(y, a.gamma)
        return T.add(y, a.beta)

    def weight(self, key, w):
        p = self.consumer.get(key)
        if p is None:
            return w
        return T.mul(w, recalibrate(self.points[p]))

    def effective_weights(self, state):
        """Materialized column-scaled weights ``{weight key: array}``."""
        out = {}
        with T.no_grad():
            for key in self.spec.weight_inputs():
                w = self.param(state, f"{key}.weight")
                out[key] = self.weight(key, w).data.copy()
        return out


_CLASSES = {
    "none": PartialTuning,
    "linear_probe": PartialTuning,
    "bitfit": PartialTuning,
    "full": PartialTuning,
    "ssf": SSF,
    "lora": LoRA,
    "vpt": VPT,
    "san": SAN,
}


def make_adapter(state, method, seed=0):
    if isinstance(method, str):
        from .methods import parse_method

        method = parse_method(method)
    elif not isinstance(method, Method):
        method = Method.from_dict(method)
    return _CLASSES[method.kind](state, method, seed=seed)


def san_forward(adapters, model, x, trace=None):
    """Forward ``model`` under SAN given one ``SanAdapter`` per attach point."""
    if isinstance(adapters, SAN):
        san = adapters
    else:
        vals = list(adapters.values()) if isinstance(adapters, dict) else list(adapters)
        modeling = all(a.modeling for a in vals) if vals else True
        propagate = any(a.propagate for a in vals) if vals else True
        recal = "full" if any(a.recal_scale is not None and a.recal_scale.ndim == 2 for a in vals) else "diagonal"
        san = SAN.from_points(model, adapters, modeling=modeling, propagate=propagate, recal=recal)
    return san(model, x, trace=trace)
