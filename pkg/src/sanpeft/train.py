"""Deterministic desk-scale fine-tuning runs and method comparisons."""
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .adapters import make_adapter
from .checkpoint import save_checkpoint
from .data import gen_synthetic, load_dataset
from .errors import ConfigError, NumericError
from .methods import Method
from .models import build_reference_model, count_params, model_spec, trainable_base_names
from .optim import OPTIMIZERS, lr_at, optimizer_step
from .reparam import gamma_deviation, san_regularizer

log = logging.getLogger(__name__)

METRICS_SCHEMA = "sanpeft.metrics/1"
ADAPTER_LR = 1e-3
FULL_LR = 1e-4


def _strict(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(d).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    return d


@dataclass
class ModelConfig:
    kind: str = "mlp_chain"
    dims: list = field(default_factory=lambda: [2, 16, 16, 2])
    activation: str = None
    grid: int = 2
    init_std: float = 0.02


@dataclass
class DataConfig:
    task: str = None
    n: int = 400
    seed: int = None
    options: dict = field(default_factory=dict)
    path: str = None
    format: str = "csv_labeled"
    labels_path: str = None


@dataclass
class PretrainConfig:
    epochs: int = 60
    lr: float = 1e-2
    batch_size: int = None
    dataset: dict = None


@dataclass
class TrainConfig:
    method: Method = field(default_factory=lambda: Method("san"))
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: DataConfig = field(default_factory=lambda: DataConfig(task="two_moons"))
    epochs: int = 30
    lr: float = None
    warmup_fraction: float = 0.1
    seed: int = 0
    dtype: str = "float64"
    optimizer: str = "adamw"
    batch_size: int = None
    pretrain: PretrainConfig = None

    def __post_init__(self):
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if int(self.epochs) < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size is not None and int(self.batch_size) < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.dataset.task is None and self.dataset.path is None:
            raise ConfigError("dataset needs either task or path")
        if self.method.kind == "vpt" and self.model.kind != "vit_toy":
            raise ConfigError("vpt needs model.kind = vit_toy")

    @property
    def base_lr(self):
        if self.lr is not None:
            return float(self.lr)
        return FULL_LR if self.method.kind == "full" else ADAPTER_LR

    @classmethod
    def from_dict(cls, d):
        d = dict(_strict(cls, d, "config"))
        if "method" in d:
            d["method"] = Method.from_dict(d["method"])
        if "model" in d:
            d["model"] = ModelConfig(**_strict(ModelConfig, d["model"], "model"))
        if "dataset" in d:
            d["dataset"] = DataConfig(**_strict(DataConfig, d["dataset"], "dataset"))
        if d.get("pretrain") is not None:
            d["pretrain"] = PretrainConfig(**_strict(PretrainConfig, d["pretrain"], "pretrain"))
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["method"] = self.method.to_dict()
        return d

    def digest(self):
        return config_hash(self.to_dict())


def config_hash(d):
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class RunMetrics:
    method: str
    train_loss: list
    eval_loss: list
    eval_acc: list
    final_train_acc: float
    final_eval_acc: float
    base_eval_acc: float
    base_eval_loss: float
    trainable: int
    total: int
    ratio: float
    gamma_dev: list
    frozen_hash_before: str
    frozen_hash_after: str
    header: dict
    config: dict
    dataset: dict
    wall_clock: float = 0.0
    schema: str = METRICS_SCHEMA
    adapter: object = field(default=None, repr=False, compare=False)
    base: object = field(default=None, repr=False, compare=False)

    @property
    def frozen_ok(self):
        return self.frozen_hash_before == self.frozen_hash_after

    def to_dict(self):
        """Deterministic record; wall-clock time is kept out of it."""
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("wall_clock", "adapter", "base")}
        d["frozen_ok"] = self.frozen_ok
        return d


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def build_dataset(cfg, seed):
    dc = cfg if isinstance(cfg, DataConfig) else DataConfig(**cfg)
    s = seed if dc.seed is None else dc.seed
    if dc.path is not None:
        return load_dataset(dc.path, dc.format, labels_path=dc.labels_path, seed=s)
    return gen_synthetic(dc.task, dc.n, s, **dc.options)


def _source_dataset(cfg):
    """Dataset used to pre-train the base model."""
    pre = cfg.pretrain
    if pre.dataset is not None:
        dc = DataConfig(**_strict(DataConfig, pre.dataset, "pretrain.dataset"))
        return build_dataset(dc, cfg.seed + 1)
    dc = cfg.dataset
    opts = dict(dc.options)
    if dc.task == "scaled_shifted_gaussians":
        opts.update(gamma=1.0, beta=0.0)
    src = DataConfig(task=dc.task, n=dc.n, seed=None if dc.seed is None else dc.seed + 1, options=opts,
                     path=dc.path, format=dc.format, labels_path=dc.labels_path)
    return build_dataset(src, cfg.seed + 1)


def _model_kwargs(mc):
    kw = {"init_std": mc.init_std}
    if mc.activation is not None:
        kw["activation"] = mc.activation
    if mc.kind == "vit_toy":
        kw["grid"] = mc.grid
    return kw


def evaluate(state, adapter, x, y):
    """``(loss, accuracy)``; argmax ties resolve to the lowest class index."""
    with T.no_grad():
        logits = T.Tensor(x, dtype=state.dtype)
        out = adapter(state, logits) if adapter is not None else _plain_forward(state, logits)
        loss = T.cross_entropy(out, y).item()
    acc = float(np.mean(np.argmax(out.data, axis=1) == y))
    return loss, acc


def _plain_forward(state, x):
    from .models import forward

    return forward(state, x)


def _batches(n, batch_size, seed, epoch):
    if batch_size is None or batch_size >= n:
        return [np.arange(n)]
    perm = np.random.default_rng([seed, epoch, 0xBA7C]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def fit(state, adapter, x, y, epochs, base_lr, seed, optimizer="adamw", batch_size=None,
        warmup_fraction=0.1, lam=0.0, on_epoch=None):
    """Optimize ``adapter``'s tensors on ``(x, y)``; returns per-epoch mean train loss."""
    params = [t for _, t in adapter.parameters()]
    decay = [t.ndim == 2 for t in params]
    steps_per_epoch = len(_batches(len(y), batch_size, seed, 0))
    total = epochs * steps_per_epoch
    opt_state = {}
    step = 0
    losses = []
    for epoch in range(epochs):
        running = []
        for idx in _batches(len(y), batch_size, seed, epoch):
            T.zero_grads(params)
            xb = T.Tensor(x[idx], dtype=state.dtype)
            try:
                loss = T.cross_entropy(adapter(state, xb), y[idx])
                if lam:
                    loss = T.add(loss, san_regularizer(adapter.gammas(), lam))
                T.backward(loss)
            except NumericError as exc:
                raise NumericError(f"training diverged at epoch {epoch + 1}, step {step + 1}: {exc}") from exc
            running.append(loss.item())
            step += 1
            # schedule spans total + 1 points so neither the first nor last update is zero
            lr = lr_at(step, total + 1, base_lr, warmup_fraction)
            new, opt_state = optimizer_step(optimizer, [p.data for p in params],
                                            [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params],
                                            opt_state, lr, decay)
            for p, v in zip(params, new):
                p.data = v.astype(p.data.dtype, copy=False)
        losses.append(float(np.mean(running)))
        if on_epoch is not None:
            on_epoch(epoch + 1)
    return losses


def _check_fit(ds, mc, what):
    spec = model_spec(mc.kind, mc.dims, **{k: v for k, v in _model_kwargs(mc).items() if k != "init_std"})
    if ds.dim != spec.in_dim:
        raise ConfigError(f"{what} has {ds.dim} features but the model expects {spec.in_dim}")


def pretrain_base(cfg):
    mc = cfg.model
    dtype = np.float64 if cfg.dtype == "float64" else np.float32
    base = build_reference_model(mc.kind, mc.dims, seed=cfg.seed, dtype=dtype, **_model_kwargs(mc))
    if cfg.pretrain is None:
        return base
    src = _source_dataset(cfg)
    _check_fit(src, mc, "pretrain dataset")
    full = make_adapter(base, Method("full"), seed=cfg.seed)
    xs, ys = src.train
    pre = cfg.pretrain
    fit(base, full, xs, ys, pre.epochs, pre.lr, cfg.seed, cfg.optimizer, pre.batch_size, cfg.warmup_fraction)
    return full.trained_base(base)


# ---------------------------------------------------------------------------
# train / compare
# ---------------------------------------------------------------------------


def train(config, out_dir=None, base_cache=None):
    """Run one fine-tuning experiment; optionally write artifacts to ``out_dir``."""
    cfg = config if isinstance(config, TrainConfig) else TrainConfig.from_dict(config)
    t0 = time.perf_counter()
    method = cfg.method
    key = json.dumps({k: cfg.to_dict()[k] for k in ("model", "dataset", "pretrain", "seed", "dtype", "optimizer",
                                                      "warmup_fraction")}, sort_keys=True)
    ds = build_dataset(cfg.dataset, cfg.seed)
    _check_fit(ds, cfg.model, "dataset")
    if base_cache is not None and key in base_cache:
        base = base_cache[key]
    else:
        base = pretrain_base(cfg)
        if base_cache is not None:
            base_cache[key] = base
    head = base.spec.head
    if head is not None and head.out_dim != ds.classes:
        raise ConfigError(f"model head has {head.out_dim} outputs but the dataset has {ds.classes} classes")

    released = set(trainable_base_names(base.spec, method))
    frozen_names = [n for n in base.weights if n not in released]
    hash_before = base.digest(frozen_names)

    adapter = make_adapter(base, method, seed=cfg.seed)
    counts = count_params(base.spec, method)
    assert counts["trainable"] == adapter.num_trainable(), "parameter accounting drifted from adapter state"

    xtr, ytr = ds.train
    xev, yev = ds.eval
    base_loss, base_acc = evaluate(base, None, xev, yev)
    ev_loss, ev_acc = evaluate(base, adapter, xev, yev)
    eval_loss, eval_acc = [ev_loss], [ev_acc]
    gdev = [gamma_deviation(adapter.gammas())]

    def on_epoch(epoch):
        l, a = evaluate(base, adapter, xev, yev)
        eval_loss.append(l)
        eval_acc.append(a)
        gdev.append(gamma_deviation(adapter.gammas()))
        log.debug("epoch %d eval_loss=%.5f eval_acc=%.4f", epoch, l, a)

    train_loss = fit(base, adapter, xtr, ytr, cfg.epochs, cfg.base_lr, cfg.seed, cfg.optimizer, cfg.batch_size,
                     cfg.warmup_fraction, lam=method.lam if method.kind == "san" else 0.0, on_epoch=on_epoch)
    _, train_acc = evaluate(base, adapter, xtr, ytr)
    hash_after = base.digest(frozen_names)
    metrics = RunMetrics(
        method=method.label,
        train_loss=train_loss,
        eval_loss=eval_loss,
        eval_acc=eval_acc,
        final_train_acc=train_acc,
        final_eval_acc=eval_acc[-1],
        base_eval_acc=base_acc,
        base_eval_loss=base_loss,
        trainable=counts["trainable"],
        total=counts["total"],
        ratio=counts["ratio"],
        gamma_dev=gdev if adapter.gammas() else [],
        frozen_hash_before=hash_before,
        frozen_hash_after=hash_after,
        header={"config_hash": cfg.digest(), "seed": cfg.seed},
        config=cfg.to_dict(),
        dataset=ds.descriptor(),
        wall_clock=time.perf_counter() - t0,
        adapter=adapter,
        base=base,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "metrics.json", metrics.to_dict())
        write_json(out / "timing.json", {"wall_clock_seconds": metrics.wall_clock})
        save_checkpoint(out / "adapted", base, adapter, header=metrics.header)
    return metrics


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _shared(cfg):
    d = cfg.to_dict()
    return {k: d[k] for k in ("model", "dataset")}


def compare(configs, report_path=None, seeds=(0, 1, 2)):
    """Run every config over ``seeds``; rows of mean/std eval accuracy and budgets."""
    cfgs = [c if isinstance(c, TrainConfig) else TrainConfig.from_dict(c) for c in configs]
    if not cfgs:
        raise ConfigError("compare needs at least one config")
    seeds = [int(s) for s in seeds]
    if len(seeds) < 3:
        raise ConfigError(f"compare needs at least 3 seeds, got {len(seeds)}")
    ref = _shared(cfgs[0])
    for c in cfgs[1:]:
        if _shared(c) != ref:
            raise ConfigError(f"config for {c.method.label} uses a different model or dataset")
    cache = {}
    rows = []
    for c in cfgs:
        accs, base_accs = [], []
        m = None
        for s in seeds:
            d = c.to_dict()
            d["seed"] = s
            m = train(TrainConfig.from_dict(d), base_cache=cache)
            accs.append(m.final_eval_acc)
            base_accs.append(m.base_eval_acc)
        rows.append({
            "method": c.method.label,
            "method_config": c.method.to_dict(),
            "acc_mean": float(np.mean(accs)),
            "acc_std": float(np.std(accs)),
            "acc_per_seed": accs,
            "base_acc_mean": float(np.mean(base_accs)),
            "trainable": m.trainable,
            "total": m.total,
            "ratio": m.ratio,
        })
    report = {
        "schema": "sanpeft.compare/1",
        "header": {"config_hash": config_hash([c.to_dict() for c in cfgs]), "seeds": seeds},
        "shared": ref,
        "rows": rows,
    }
    if report_path is not None:
        write_json(report_path, report)
    return report


def format_table(rows):
    lines = [f"{'method':<28}{'acc (mean±std)':>18}{'trainable':>12}{'ratio':>10}"]
    for r in rows:
        acc = f"{100 * r['acc_mean']:.2f}±{100 * r['acc_std']:.2f}"
        lines.append(f"{r['method']:<28}{acc:>18}{r['trainable']:>12}{100 * r['ratio']:>9.2f}%")
    return "\n".join(lines)
