"""Hyperparameters and the ``key = value`` configuration format."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path


@dataclass(frozen=True)
class SGDSettings:
    learning_rate: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    epochs_per_round: int = 5
    head_lr_mult: float = 10.0


@dataclass(frozen=True)
class HyperParams:
    """Weights of the four loss terms plus quantizer and optimizer settings.

    ``alpha``, ``lam`` and ``gamma`` weight the quantization, center and
    discriminative losses. ``zeta`` is the center learning rate and
    ``k_perturb`` the number of subcodes reset per local-search perturbation.
    ``sparsity_eps`` switches codebook learning to the L1 variant with that
    nonzero budget.
    """

    alpha: float = 1.0
    lam: float = 0.01
    gamma: float = 0.1
    zeta: float = 0.5
    k_perturb: int = 4
    m: int = 4
    h: int = 256
    p: int = 256
    sgd: SGDSettings = field(default_factory=SGDSettings)
    sparsity_eps: int | None = None
    sls_rounds: int = 8
    icm_iters: int = 2
    ridge: float = 1e-6

    def __post_init__(self):
        if min(self.alpha, self.lam, self.gamma) < 0:
            raise ValueError("alpha, lambda and gamma must be non-negative")
        if not 0 < self.zeta <= 1:
            raise ValueError(f"zeta must lie in (0, 1], got {self.zeta}")
        if self.k_perturb < 0:
            raise ValueError("k_perturb must be non-negative")
        if self.m < 1 or not 2 <= self.h <= 256 or self.p < 1:
            raise ValueError(f"invalid quantizer shape m={self.m}, h={self.h}, p={self.p}")
        if self.sgd.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.sls_rounds < 1 or self.icm_iters < 1:
            raise ValueError("sls_rounds and icm_iters must be at least 1")
        if self.sparsity_eps is not None and not 0 < self.sparsity_eps <= self.m * self.h * self.p:
            raise ValueError(f"sparsity_eps must lie in (0, m*h*p={self.m * self.h * self.p}]")

    @property
    def bits(self) -> int:
        return int(self.m * math.log2(self.h))


def m_from_bits(bits: int, h: int = 256) -> int:
    """Number of codebooks so that ``m * log2(h) == bits``."""
    per = math.log2(h)
    if per != int(per):
        raise ValueError(f"h={h} is not a power of two")
    if bits <= 0 or bits % int(per):
        raise ValueError(f"bits={bits} is not a positive multiple of log2(h)={int(per)}")
    return bits // int(per)


# Config keys map onto HyperParams / SGDSettings fields; "lambda" is spelled out.
_HP_KEYS = {f.name: f.type for f in fields(HyperParams) if f.name != "sgd"}
_HP_KEYS["lambda"] = _HP_KEYS.pop("lam")
_SGD_KEYS = {f.name: f.type for f in fields(SGDSettings)}
RUN_KEYS = {"rounds": "int", "seed": "int", "rel_tol": "float | None", "bits": "int"}
VALID_KEYS = sorted({**_HP_KEYS, **_SGD_KEYS, **RUN_KEYS})


def _coerce(key: str, raw: str, typ: str):
    if raw.lower() in ("none", "") and "None" in typ:
        return None
    if typ.startswith("int"):
        return int(raw)
    return float(raw)


def parse_config(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        typ = _HP_KEYS.get(key) or _SGD_KEYS.get(key) or RUN_KEYS.get(key)
        if typ is None:
            raise ValueError(f"{source}:{lineno}: unknown config key {key!r}; valid keys: {', '.join(VALID_KEYS)}")
        try:
            out[key] = _coerce(key, raw, str(typ))
        except ValueError:
            raise ValueError(f"{source}:{lineno}: bad value {raw!r} for {key}") from None
    return out


def read_config(path) -> dict:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def hyperparams_from_dict(values: dict, base: HyperParams | None = None) -> HyperParams:
    """Build HyperParams from flat config values; run-level keys are ignored."""
    base = base or HyperParams()
    hp_kw, sgd_kw = {}, {}
    for key, val in values.items():
        if key in _SGD_KEYS:
            sgd_kw[key] = val
        elif key == "lambda":
            hp_kw["lam"] = val
        elif key in _HP_KEYS:
            hp_kw[key] = val
        elif key not in RUN_KEYS:
            raise ValueError(f"unknown config key {key!r}; valid keys: {', '.join(VALID_KEYS)}")
    return replace(base, sgd=replace(base.sgd, **sgd_kw), **hp_kw)


def format_config(hp: HyperParams, extra: dict | None = None) -> str:
    lines = []
    for f in fields(HyperParams):
        if f.name == "sgd":
            continue
        key = "lambda" if f.name == "lam" else f.name
        lines.append(f"{key} = {getattr(hp, f.name)}")
    for f in fields(SGDSettings):
        lines.append(f"{f.name} = {getattr(hp.sgd, f.name)}")
    for key, val in (extra or {}).items():
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"
