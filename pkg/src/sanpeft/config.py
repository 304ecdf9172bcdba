"""Config files, named presets and ``key.path=value`` overrides.

A config is a YAML or JSON mapping with the keys of ``TrainConfig``.  A
comparison config adds a ``compare`` block::

    compare:
      methods: [linear_probe, ssf, san-both]
      seeds: [0, 1, 2]
"""
import copy
from importlib import resources
from pathlib import Path

import yaml

from .errors import ConfigError
from .methods import Method



def _preset_dir():
    return resources.files("sanpeft").joinpath("presets")


def preset_names():
    return sorted(p.name[:-5] for p in _preset_dir().iterdir() if p.name.endswith(".yaml"))


def _parse(text, where):
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: top level must be a mapping")
    return data


def load_config(ref):
    """Load ``ref`` as a file path, or else as a preset name."""
    path = Path(ref)
    if path.is_file():
        return _parse(path.read_text(encoding="utf-8"), str(path))
    if ref in preset_names():
        text = _preset_dir().joinpath(f"{ref}.yaml").read_text(encoding="utf-8")
        return _parse(text, f"preset {ref}")
    raise ConfigError(f"config {ref!r} is neither a file nor a preset ({', '.join(preset_names())})")


def apply_overrides(config, overrides):
    """Return a copy of ``config`` with ``a.b.c=value`` overrides applied (values parsed as YAML)."""
    out = copy.deepcopy(config)
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override {item!r} must look like key.path=value")
        try:
            value = yaml.safe_load(raw) if raw.strip() else None
        except yaml.YAMLError:
            value = raw
        parts = key.strip().split(".")
        node = out
        for i, part in enumerate(parts[:-1]):
            child = node.get(part)
            if isinstance(child, str) and part == "method" and node is out:
                child = Method.from_dict(child).to_dict()
            if child is None:
                child = {}
            if not isinstance(child, dict):
                raise ConfigError(f"override {key!r}: {'.'.join(parts[:i + 1])} is not a mapping")
            node[part] = child
            node = child
        node[parts[-1]] = value
    return out


def split_compare(config):
    """``(shared_config, methods, seeds)`` from a comparison config."""
    cfg = dict(config)
    block = cfg.pop("compare", None)
    if not isinstance(block, dict):
        raise ConfigError("comparison config needs a 'compare' mapping")
    unknown = sorted(set(block) - {"methods", "seeds"})
    if unknown:
        raise ConfigError(f"compare: unknown key(s) {', '.join(unknown)}")
    methods = block.get("methods") or []
    if not methods:
        raise ConfigError("compare.methods is empty")
    seeds = block.get("seeds", [0, 1, 2])
    cfg.pop("method", None)
    return cfg, [Method.from_dict(m) for m in methods], [int(s) for s in seeds]
