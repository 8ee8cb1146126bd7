"""Run configuration and the flat key-value config file format."""

from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import ConfigurationError

ABLATION_FLAGS = ("no_ctt", "no_rt", "no_grspe", "no_gstf", "no_rbct",
                  "rt_before_ctt", "no_multiview", "no_flow_head_extra")


@dataclass
class TrainConfig:
    # model
    feature_dim: int = 16
    M: int = 32
    hidden_width: int = 32
    n_resblocks: int = 4
    flow_clamp: float = 0.25
    encoder_blocks: int = 3
    encoder_scale: float = 1.0
    blend_in_transmittance: bool = False
    dtype: str = "float32"
    # ablations
    no_ctt: bool = False
    no_rt: bool = False
    no_grspe: bool = False
    no_gstf: bool = False
    no_rbct: bool = False
    rt_before_ctt: bool = False
    no_multiview: bool = False
    no_flow_head_extra: bool = False
    # optimization (paper-scale: 300K static + 200K dynamic, M=64)
    steps_static: int = 4000
    steps_dynamic: int = 4000
    rays_per_batch: int = 128
    learning_rate: float = 5e-4
    lr_floor: float = 0.1          # cosine decay down to lr * lr_floor
    seed: int = 0
    # loss weights
    w_small: float = 0.1
    w_depth: float = 0.04
    w_flow: float = 0.02
    static_all_ray_fraction: float = 0.1
    # bookkeeping
    log_every: int = 200
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.steps_static < 0 or self.steps_dynamic < 0:
            raise ConfigurationError("step counts must be >= 0")
        if self.rays_per_batch < 1:
            raise ConfigurationError("rays_per_batch must be >= 1")
        if self.M < 1:
            raise ConfigurationError("M must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError("dtype must be float32 or float64")

    def replace(self, **kw):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(kw)
        return TrainConfig(**d)


def _parse_value(text, ftype):
    text = text.strip()
    if ftype is bool:
        if text.lower() in ("true", "1", "yes", "on"):
            return True
        if text.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigurationError(f"bad boolean {text!r}")
    return ftype(text)


def load_config(path):
    """Flat `key = value` text file with typed keys; unknown keys rejected."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    pytypes = {"int": int, "float": float, "bool": bool, "str": str}
    kw = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigurationError(f"{path}:{lineno}: unknown key {key!r}")
            ftype = pytypes.get(types[key], str) if isinstance(types[key], str) else types[key]
            kw[key] = _parse_value(val, ftype)
    return TrainConfig(**kw)


def save_config(cfg: TrainConfig, path):
    with open(path, "w") as fh:
        for f in fields(TrainConfig):
            fh.write(f"{f.name} = {getattr(cfg, f.name)}\n")
