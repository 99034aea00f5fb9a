"""Flat ``key = value`` training configs.

Keys are the field names of TrainConfig, MiningConfig and LossConfig
(``lambda`` is accepted for ``lam``). An optional ``profile`` key picks the
starting point: ``desk`` (default) or ``full``. Blank lines and ``#``
comments are ignored.
"""

import dataclasses

from .errors import ValidationError
from .mining import MiningConfig
from .training import DESK_PROFILE, FULL_PROFILE, TrainConfig

PROFILES = {"desk": DESK_PROFILE, "full": FULL_PROFILE}
ALIASES = {"lambda": "lam", "m": "margin"}
_TRAIN_FIELDS = {f.name: f.type for f in dataclasses.fields(TrainConfig) if f.name != "mining"}
_MINING_FIELDS = {f.name: f.type for f in dataclasses.fields(MiningConfig) if f.name != "seed"}


def _coerce(key, raw, kind):
    kind = kind if isinstance(kind, type) else {"int": int, "float": float, "bool": bool}[kind]
    if kind is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValidationError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return int(raw) if kind is int else float(raw)
    except ValueError:
        raise ValidationError(f"{key}: expected {kind.__name__}, got {raw!r}") from None


def parse_pairs(lines, where="config"):
    pairs = {}
    for n, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{where} line {n}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs[ALIASES.get(key, key)] = value
    return pairs


def build_config(pairs):
    pairs = dict(pairs)
    profile = pairs.pop("profile", "desk")
    if profile not in PROFILES:
        raise ValidationError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    base = PROFILES[profile]
    train, mining = {}, {}
    for key, raw in pairs.items():
        if key in _TRAIN_FIELDS:
            train[key] = _coerce(key, raw, _TRAIN_FIELDS[key])
        elif key in _MINING_FIELDS:
            mining[key] = _coerce(key, raw, _MINING_FIELDS[key])
        else:
            raise ValidationError(f"unknown config key {key!r}")
    return base.replace(mining=dataclasses.replace(base.mining, **mining), **train)


def load_config(path=None, overrides=()):
    """Read ``path`` (if any) and apply ``key=value`` override strings on top."""
    pairs = {}
    if path:
        with open(path) as fh:
            pairs.update(parse_pairs(fh.read().splitlines(), path))
    pairs.update(parse_pairs(overrides, "override"))
    return build_config(pairs)


def dump_config(cfg):
    lines = [f"{k} = {getattr(cfg, k)}" for k in _TRAIN_FIELDS]
    lines += [f"{k} = {getattr(cfg.mining, k)}" for k in _MINING_FIELDS]
    return "\n".join(lines) + "\n"
