"""Frozen-base layers, reference architectures and parameter accounting.

A model is an ordered list of ``LayerSpec`` records interpreted by
``forward``.  Residual wiring is expressed with two flags: a layer marked
``residual_start`` saves the incoming stream and one marked
``residual_end`` adds it back after its own output (and attach point).
"""
import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .methods import Method

LAYER_KINDS = ("linear", "activation", "layernorm", "attention", "embedding_patchify")
LN_EPS = 1e-5


@dataclass
class LayerSpec:
    kind: str
    name: str
    in_dim: int
    out_dim: int
    activation: str = None
    attach_points: list = field(default_factory=list)
    residual_start: bool = False
    residual_end: bool = False
    head: bool = False
    pool_token: int = None
    tokens: int = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ConfigError(f"layer {self.name}: dims must be positive, got {self.in_dim}->{self.out_dim}")

    def param_shapes(self):
        n, i, o = self.name, self.in_dim, self.out_dim
        if self.kind == "linear":
            return [(f"{n}.weight", (o, i)), (f"{n}.bias", (o,))]
        if self.kind == "layernorm":
            return [(f"{n}.gain", (o,)), (f"{n}.bias", (o,))]
        if self.kind == "attention":
            out = []
            for p in "qkv":
                out += [(f"{n}.{p}.weight", (o, i)), (f"{n}.{p}.bias", (o,))]
            return out
        if self.kind == "embedding_patchify":
            return [
                (f"{n}.weight", (o, i)),
                (f"{n}.bias", (o,)),
                (f"{n}.cls", (o,)),
                (f"{n}.pos", (self.tokens + 1, o)),
            ]
        return []

    def weight_keys(self):
        """Consumer keys of the weight matrices this layer applies to its input."""
        if self.kind == "linear":
            return [self.name]
        if self.kind == "attention":
            return [f"{self.name}.{p}" for p in "qkv"]
        return []


@dataclass
class ModelSpec:
    kind: str
    layers: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        seen = set()
        prev = None
        for layer in self.layers:
            if prev is not None and prev.out_dim != layer.in_dim:
                raise ConfigError(
                    f"layer {layer.name} expects in_dim {layer.in_dim} but {prev.name} emits {prev.out_dim}"
                )
            for p in layer.attach_points:
                if p in seen:
                    raise ConfigError(f"duplicate attach point {p!r}")
                seen.add(p)
            prev = layer

    @property
    def in_dim(self):
        first = self.layers[0]
        if first.kind == "embedding_patchify":
            return first.tokens * first.in_dim
        return first.in_dim

    @property
    def head(self):
        for layer in self.layers:
            if layer.head:
                return layer
        return None

    def param_shapes(self):
        out = []
        for layer in self.layers:
            out += layer.param_shapes()
        return out

    def attach_dims(self):
        """Ordered ``{attach_point: channel_dim}``."""
        return {p: layer.out_dim for layer in self.layers for p in layer.attach_points}

    def propagation_links(self):
        """``{attach_point: [weight keys consuming its scaled output]}``.

        Each weight matrix consumes the nearest upstream attach point on its
        channel path.  Activations pass the point through; a layernorm or a
        linear replaces it with its own; a residual merge clears it (the
        skip path is never scaled); inside attention the value path carries
        the v projection's point to the next consumer.
        """
        links = {}
        current = None
        for layer in self.layers:
            if layer.kind in ("linear", "attention") and current is not None:
                links.setdefault(current, []).extend(layer.weight_keys())
            if layer.kind == "attention":
                current = f"{layer.name}.v.out"
            elif layer.attach_points:
                current = layer.attach_points[-1]
            if layer.residual_end:
                current = None
        return links

    def weight_inputs(self):
        """``{weight key: in_dim}`` for every propagatable / LoRA-able matrix."""
        return {k: layer.in_dim for layer in self.layers for k in layer.weight_keys()}

    def lora_targets(self):
        """``{weight key: (in_dim, out_dim)}``: every non-head linear map."""
        out = {}
        for layer in self.layers:
            if layer.head:
                continue
            for k in layer.weight_keys():
                out[k] = (layer.in_dim, layer.out_dim)
        return out

    def to_dict(self):
        return {"kind": self.kind, "meta": dict(self.meta), "layers": [asdict(l) for l in self.layers]}

    @classmethod
    def from_dict(cls, d):
        return cls(kind=d["kind"], meta=dict(d.get("meta", {})), layers=[LayerSpec(**l) for l in d["layers"]])


# ---------------------------------------------------------------------------
# model state
# ---------------------------------------------------------------------------


class ModelState:
    """Spec plus base weights.  Treated as read-only once built."""

    def __init__(self, spec, weights, dtype=np.float64):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        shapes = spec.param_shapes()
        missing = [n for n, _ in shapes if n not in weights]
        if missing:
            raise DimensionError(f"missing weights: {', '.join(missing)}")
        self.weights = {}
        for name, shape in shapes:
            arr = np.array(weights[name], dtype=self.dtype, copy=True, order="C")
            if arr.shape != tuple(shape):
                raise DimensionError(f"{name}: expected shape {tuple(shape)}, got {arr.shape}")
            arr.flags.writeable = False
            self.weights[name] = arr
        self._tensors = {}

    def tensor(self, name):
        t = self._tensors.get(name)
        if t is None:
            t = self._tensors[name] = T.Tensor(self.weights[name], dtype=self.dtype, name=name)
        return t

    def replace(self, updates):
        w = dict(self.weights)
        w.update(updates)
        return ModelState(self.spec, w, self.dtype)

    def astype(self, dtype):
        return ModelState(self.spec, self.weights, dtype)

    def num_params(self):
        return sum(a.size for a in self.weights.values())

    def digest(self, names=None):
        h = hashlib.sha256()
        for name in names if names is not None else self.weights:
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.weights[name], dtype="<f8").tobytes())
        return h.hexdigest()


class BaseHooks:
    """No-op adapter hooks; adapters override the ones they need."""

    def param(self, state, name):
        return state.tensor(name)

    def weight(self, key, w):
        return w

    def extra(self, key, x, out):
        return out

    def attach(self, point, y):
        return y

    def embed(self, h):
        return h

    def before_head(self, h, tokens):
        return h


NO_HOOKS = BaseHooks()


def _linear(h, w, b):
    return T.add(T.matmul(h, T.transpose(w)), b)


def linear_forward(w, b, x):
    """``x @ w.T + b`` with the bias broadcast over rows."""
    w, b, x = T.as_tensor(w), T.as_tensor(b), T.as_tensor(x)
    if x.shape[-1] != w.shape[1] or b.shape != (w.shape[0],):
        raise DimensionError(f"linear: input {x.shape}, weight {w.shape}, bias {b.shape}")
    return _linear(x, w, b)


def attention_forward(wq, wk, wv, x, bq=None, bk=None, bv=None, trace=None):
    """Single-head ``softmax(Q K^T / sqrt(d)) V`` over ``x: [..., tokens, d]``."""
    wq, wk, wv, x = (T.as_tensor(t) for t in (wq, wk, wv, x))
    d = x.shape[-1]
    for nm, w in (("Wq", wq), ("Wk", wk), ("Wv", wv)):
        if w.shape != (d, d):
            raise DimensionError(f"attention: {nm} has shape {w.shape}, expected {(d, d)}")
    zeros = np.zeros(d, dtype=x.dtype)
    q = _linear(x, wq, bq if bq is not None else zeros)
    k = _linear(x, wk, bk if bk is not None else zeros)
    v = _linear(x, wv, bv if bv is not None else zeros)
    return _attend(q, k, v, trace)


def _attend(q, k, v, trace=None, key="attn"):
    d = q.shape[-1]
    scores = T.mul(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d))
    probs = T.softmax(scores)
    if trace is not None:
        trace[f"{key}.probs"] = probs.data
    return T.matmul(probs, v)


def layernorm_forward(gain, bias, x, eps=LN_EPS):
    x = T.as_tensor(x)
    if x.ndim < 1 or x.shape[-1] == 0:
        raise DimensionError("layernorm over a zero-length axis")
    return T.add(T.mul(T.normalize(x, eps), gain), bias)


def forward(state, x, hooks=None, trace=None):
    """Evaluate ``state`` on a batch ``x`` with optional adapter ``hooks``."""
    hooks = hooks or NO_HOOKS
    spec = state.spec
    x = T.as_tensor(x, dtype=state.dtype)
    if x.ndim != 2 or x.shape[1] != spec.in_dim:
        raise DimensionError(f"model expects input [batch, {spec.in_dim}], got {x.shape}")
    P = lambda n: hooks.param(state, n)  # noqa: E731
    h = x
    skip = None
    tokens = None
    for layer in spec.layers:
        if layer.residual_start:
            skip = h
        n = layer.name
        if layer.kind == "embedding_patchify":
            tokens = layer.tokens
            h = T.reshape(h, (h.shape[0], layer.tokens, layer.in_dim))
            w = hooks.weight(n, P(f"{n}.weight"))
            y = hooks.extra(n, h, _linear(h, w, P(f"{n}.bias")))
            y = hooks.attach(f"{n}.out", y)
            cls = T.expand(T.reshape(P(f"{n}.cls"), (1, layer.out_dim)), (y.shape[0],))
            h = T.add(T.concat([y, cls], axis=1), P(f"{n}.pos"))
            h = hooks.embed(h)
        elif layer.kind == "linear":
            if layer.head and layer.pool_token is not None:
                h = hooks.before_head(h, tokens + 1)
                h = T.select(h, layer.pool_token, axis=1)
            w = hooks.weight(n, P(f"{n}.weight"))
            y = hooks.extra(n, h, _linear(h, w, P(f"{n}.bias")))
            h = hooks.attach(f"{n}.out", y)
        elif layer.kind == "activation":
            h = T.ACTIVATIONS[layer.activation](h)
        elif layer.kind == "layernorm":
            h = hooks.attach(f"{n}.out", layernorm_forward(P(f"{n}.gain"), P(f"{n}.bias"), h))
        elif layer.kind == "attention":
            qkv = []
            for p in "qkv":
                key = f"{n}.{p}"
                w = hooks.weight(key, P(f"{key}.weight"))
                y = hooks.extra(key, h, _linear(h, w, P(f"{key}.bias")))
                qkv.append(hooks.attach(f"{key}.out", y))
            h = _attend(*qkv, trace=trace, key=n)
        if layer.residual_end:
            h = T.add(h, skip)
            skip = None
        if trace is not None:
            trace[layer.name] = h.data
    return h


# ---------------------------------------------------------------------------
# reference architectures
# ---------------------------------------------------------------------------


def _linear_layer(name, i, o, **kw):
    return LayerSpec("linear", name, i, o, attach_points=[f"{name}.out"], **kw)


def _ln_layer(name, d, **kw):
    return LayerSpec("layernorm", name, d, d, attach_points=[f"{name}.out"], **kw)


def mlp_chain_spec(dims, activation="relu"):
    if len(dims) < 2 or any(int(d) < 1 for d in dims):
        raise ConfigError(f"mlp_chain needs >= 2 positive dims, got {dims}")
    if activation not in T.ACTIVATIONS:
        raise ConfigError(f"unknown activation {activation!r}")
    layers = []
    last = len(dims) - 2
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        layers.append(_linear_layer(f"fc{i}", a, b, head=i == last))
        if i != last:
            layers.append(LayerSpec("activation", f"act{i}", b, b, activation=activation))
    return ModelSpec("mlp_chain", layers, {"dims": list(dims), "activation": activation})


def vit_spec(patch_dim, d, mlp_dim, classes, grid, depth=1, activation="gelu", kind="vit"):
    """Pre-norm transformer: patchify -> depth x (attention, MLP) -> norm -> head.

    ``classes=0`` drops the head.  The class token is appended after the
    ``grid**2`` patch tokens and the head reads it.
    """
    for nm, v in (("patch_dim", patch_dim), ("d", d), ("mlp_dim", mlp_dim), ("grid", grid), ("depth", depth)):
        if int(v) < 1:
            raise ConfigError(f"vit {nm} must be positive, got {v}")
    if classes < 0:
        raise ConfigError(f"classes must be >= 0, got {classes}")
    tokens = grid * grid
    layers = [
        LayerSpec("embedding_patchify", "embed", patch_dim, d, attach_points=["embed.out"], tokens=tokens)
    ]
    for b in range(depth):
        p = f"block{b}"
        layers += [
            _ln_layer(f"{p}.ln1", d, residual_start=True),
            LayerSpec("attention", f"{p}.attn", d, d, attach_points=[f"{p}.attn.{x}.out" for x in "qkv"]),
            _linear_layer(f"{p}.proj", d, d, residual_end=True),
            _ln_layer(f"{p}.ln2", d, residual_start=True),
            _linear_layer(f"{p}.fc1", d, mlp_dim),
            LayerSpec("activation", f"{p}.act", mlp_dim, mlp_dim, activation=activation),
            _linear_layer(f"{p}.fc2", mlp_dim, d, residual_end=True),
        ]
    layers.append(_ln_layer("norm", d))
    if classes:
        layers.append(_linear_layer("head", d, classes, head=True, pool_token=tokens))
    meta = {"dims": [patch_dim, d, mlp_dim, classes], "grid": grid, "depth": depth, "activation": activation}
    return ModelSpec(kind, layers, meta)


def vit_b_spec():
    """ViT-B/16 at 224px shapes without a classification head."""
    return vit_spec(patch_dim=3 * 16 * 16, d=768, mlp_dim=3072, classes=0, grid=14, depth=12, kind="vit_b")


def model_spec(kind, dims=None, **kw):
    if kind == "mlp_chain":
        return mlp_chain_spec(dims, activation=kw.get("activation", "relu"))
    if kind == "vit_toy":
        if dims is None or len(dims) != 4:
            raise ConfigError("vit_toy dims are [patch_dim, d, mlp_dim, classes]")
        return vit_spec(*dims, grid=kw.get("grid", 2), depth=1, activation=kw.get("activation", "gelu"),
                        kind="vit_toy")
    if kind == "vit_b":
        return vit_b_spec()
    raise ConfigError(f"unknown model kind {kind!r}")


def init_weights(spec, seed=0, init_std=0.02):
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in spec.param_shapes():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "bias":
            weights[name] = np.zeros(shape)
        elif leaf == "gain":
            weights[name] = np.ones(shape)
        else:
            weights[name] = rng.normal(0.0, init_std, size=shape)
    return weights


def build_reference_model(kind, dims, seed=0, init_std=0.02, dtype=np.float64, **kw):
    """Seeded ``mlp_chain`` or ``vit_toy`` with Gaussian(0, init_std) weights."""
    if kind not in ("mlp_chain", "vit_toy"):
        raise ConfigError(f"reference model must be mlp_chain or vit_toy, got {kind!r}")
    spec = model_spec(kind, dims, **kw)
    return ModelState(spec, init_weights(spec, seed, init_std), dtype=dtype)


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------


def trainable_base_names(spec, method):
    names = [n for n, _ in spec.param_shapes()]
    head = spec.head
    head_names = [n for n, _ in head.param_shapes()] if head is not None else []
    if method.kind == "none":
        return []
    if method.kind == "full":
        return names
    if method.kind == "bitfit":
        return [n for n in names if n.endswith(".bias") or n in head_names]
    return head_names


def adapter_param_shapes(spec, method):
    """``[(name, shape)]`` of the parameters a method adds (beyond base weights)."""
    out = []
    dims = spec.attach_dims()
    if method.kind == "ssf":
        for p, d in dims.items():
            out += [(f"{p}.gamma", (d,)), (f"{p}.beta", (d,))]
    elif method.kind == "san":
        links = spec.propagation_links() if method.propagate else {}
        for p, d in dims.items():
            if method.modeling or p in links:
                out.append((f"{p}.gamma", (d,)))
            out.append((f"{p}.beta", (d,)))
            if p in links:
                a_shape = (d, d) if method.recal == "full" else (d,)
                out += [(f"{p}.recal_scale", a_shape), (f"{p}.recal_shift", (d,))]
    elif method.kind == "lora":
        for key, (i, o) in spec.lora_targets().items():
            if method.rank > min(i, o):
                raise ConfigError(f"lora rank {method.rank} exceeds dims of {key} ({i}->{o})")
            out += [(f"{key}.w_down", (method.rank, i)), (f"{key}.w_up", (o, method.rank))]
    elif method.kind == "vpt":
        first = spec.layers[0]
        if first.kind != "embedding_patchify":
            raise ConfigError("vpt needs a token-sequence model (vit_toy)")
        if method.prompts:
            out.append(("prompts", (method.prompts, first.out_dim)))
    return out


def count_params(spec, method):
    """Exact trainable / total counts from shapes alone."""
    if isinstance(method, str):
        from .methods import parse_method

        method = parse_method(method)
    if not isinstance(method, Method):
        method = Method.from_dict(method)
    sizes = {n: int(np.prod(s)) for n, s in spec.param_shapes()}
    base_total = sum(sizes.values())
    added = sum(int(np.prod(s)) for _, s in adapter_param_shapes(spec, method))
    trainable = sum(sizes[n] for n in trainable_base_names(spec, method)) + added
    total = base_total + added
    return {"trainable": trainable, "total": total, "ratio": trainable / total}


def recalibration_param_count(spec, method):
    if method.kind != "san" or not method.propagate:
        return 0
    return sum(
        int(np.prod(s)) for n, s in adapter_param_shapes(spec, method) if n.endswith((".recal_scale", ".recal_shift"))
    )
