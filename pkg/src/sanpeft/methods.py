"""Adapter method descriptors.

A ``Method`` is the hyperparameter record for one fine-tuning strategy; it
is enough to count parameters from shapes alone and to rebuild adapter
state from a checkpoint.
"""
from dataclasses import asdict, dataclass, fields

from .errors import ConfigError

KINDS = ("none", "linear_probe", "bitfit", "full", "ssf", "lora", "vpt", "san")
PHIS = ("identity", "relu", "gelu")


@dataclass(frozen=True)
class Method:
    kind: str
    rank: int = 4
    phi: str = "identity"
    prompts: int = 1
    modeling: bool = True
    propagate: bool = True
    recal: str = "diagonal"
    lam: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown method {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.kind == "lora":
            if int(self.rank) < 1:
                raise ConfigError(f"lora rank must be >= 1, got {self.rank}")
            if self.phi not in PHIS:
                raise ConfigError(f"unknown lora nonlinearity {self.phi!r}")
        if self.kind == "vpt" and int(self.prompts) < 0:
            raise ConfigError(f"vpt prompt count must be >= 0, got {self.prompts}")
        if self.kind == "san":
            if not (self.modeling or self.propagate):
                raise ConfigError("san needs modeling or propagate (or both)")
            if self.recal not in ("diagonal", "full"):
                raise ConfigError(f"recal must be 'diagonal' or 'full', got {self.recal!r}")
        if float(self.lam) < 0:
            raise ConfigError(f"regularization strength lam must be >= 0, got {self.lam}")

    @property
    def label(self):
        if self.kind == "lora":
            return f"lora(r={self.rank})"
        if self.kind == "vpt":
            return f"vpt(n={self.prompts})"
        if self.kind == "san":
            arm = {(True, True): "both", (True, False): "modeling", (False, True): "propagation"}
            tag = arm[(bool(self.modeling), bool(self.propagate))]
            extra = ",full-recal" if self.recal == "full" else ""
            extra += f",lam={self.lam:g}" if self.lam else ""
            return f"san({tag}{extra})"
        return self.kind

    def to_dict(self):
        """Only the fields relevant to ``kind``."""
        keep = {
            "lora": ("rank", "phi"),
            "vpt": ("prompts",),
            "san": ("modeling", "propagate", "recal", "lam"),
        }.get(self.kind, ())
        d = {"kind": self.kind}
        d.update({k: v for k, v in asdict(self).items() if k in keep})
        return d

    @classmethod
    def from_dict(cls, d):
        if isinstance(d, str):
            return parse_method(d)
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown method keys: {', '.join(sorted(unknown))}")
        if "kind" not in d:
            raise ConfigError("method needs a 'kind'")
        return cls(**d)


_SHORTHAND = {
    "san-modeling": {"kind": "san", "modeling": True, "propagate": False},
    "san-propagation": {"kind": "san", "modeling": False, "propagate": True},
    "san-both": {"kind": "san"},
}


def parse_method(text):
    """Parse ``kind[:arg]`` shorthands: ``lora:8``, ``vpt:2``, ``san-modeling``."""
    text = text.strip()
    if text in _SHORTHAND:
        return Method(**_SHORTHAND[text])
    kind, _, arg = text.partition(":")
    if not arg:
        return Method(kind=kind)
    try:
        value = int(arg)
    except ValueError:
        raise ConfigError(f"bad method argument in {text!r}") from None
    if kind == "lora":
        return Method(kind=kind, rank=value)
    if kind == "vpt":
        return Method(kind=kind, prompts=value)
    raise ConfigError(f"method {kind!r} takes no argument")
