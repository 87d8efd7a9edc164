"""Run configuration. Every field has a desk-scale default; files are JSON."""
from __future__ import annotations

import json
from dataclasses import MISSING, asdict, dataclass, field, fields


@dataclass
class DataConfig:
    n_train: int = 600
    n_test: int = 60
    mix: tuple = ("straight", "turn", "multi_modal")
    traffic: str = "random"
    dense_fraction: float = 0.5   # share of training scenes drawn with dense traffic


@dataclass
class ModelConfig:
    n_anchor: int = 8
    T_trunc: int = 8
    beta_lo: float = 0.01
    beta_hi: float = 0.05
    hidden: tuple = (128, 128)
    n_infer_steps: int = 2
    offset_basis: str = "ramp"   # ramp | poly
    offset_rank: int = 3         # polynomial degree when offset_basis == "poly"


@dataclass
class ILConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    warmup_ratio: float = 0.10


@dataclass
class RLConfig:
    G: int = 8
    gamma: float = 0.8
    lambda_il: float = 0.1
    eps_stab: float = 1e-8
    exploration_floor: float = 0.04
    likelihood_floor: float = 0.1
    init_noise_std: float = 0.1
    epochs: int = 10
    batch_size: int = 8
    lr: float = 2e-4
    weight_decay: float = 1e-4
    warmup_ratio: float = 0.10
    noise_type: str = "multiplicative"
    intra_anchor: bool = True
    inter_trunc: bool = True


@dataclass
class SelectorConfig:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 1e-4
    warmup_ratio: float = 0.10
    hidden: tuple = (64, 64)
    margin: float = 0.05
    top_k: int = 0              # 0 -> ceil(M / 2)
    n_aug: int = 2
    aug_std: tuple = (0.1, 0.2)
    coarse_to_fine: bool = True
    rank_loss: bool = True


@dataclass
class EvalConfig:
    n_candidates: int = 20
    k_values: tuple = (1, 5, 10)
    div_eps: float = 1e-6


@dataclass
class VanillaConfig:
    T: int = 50
    beta_lo: float = 1e-3
    beta_hi: float = 0.2


@dataclass
class Config:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    il: ILConfig = field(default_factory=ILConfig)
    rl: RLConfig = field(default_factory=RLConfig)
    selector: SelectorConfig = field(default_factory=SelectorConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    vanilla: VanillaConfig = field(default_factory=VanillaConfig)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_json() + "\n")

    @classmethod
    def from_dict(cls, d):
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            sub = f.default_factory() if f.default_factory is not MISSING else None  # type: ignore[misc]
            if sub is not None and hasattr(sub, "__dataclass_fields__"):
                kw[f.name] = _sub_from_dict(type(sub), d[f.name])
            else:
                kw[f.name] = d[f.name]
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        return cls(**kw)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


def _sub_from_dict(tp, d):
    names = {f.name: f for f in fields(tp)}
    unknown = set(d) - set(names)
    if unknown:
        raise ValueError(f"unknown {tp.__name__} fields: {sorted(unknown)}")
    kw = {}
    for k, v in d.items():
        default = getattr(tp(), k)
        kw[k] = tuple(v) if isinstance(default, tuple) else v
    return tp(**kw)


def validate_rl(cfg: RLConfig, ablation=False):
    if cfg.G < 2:
        raise ValueError("G must be >= 2")
    if not 0 < cfg.gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    if not (0 < cfg.lambda_il < 1 or (ablation and cfg.lambda_il == 0)):
        raise ValueError("lambda_il must lie in (0, 1)")
    if cfg.noise_type not in ("multiplicative", "additive"):
        raise ValueError("noise_type must be 'multiplicative' or 'additive'")
