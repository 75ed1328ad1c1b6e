import os
import json
import typing
from dataclasses import dataclass, field, fields, asdict, is_dataclass
from typing import Optional, List, Dict, Any

from .errors import ContractViolation

SCALE_MODES = ("raw", "inv_chw")
HEAD_NAMES = ("p5", "p4", "p3", "p2", "p1")
LOSS_TERMS = ("weighted_bce", "weighted_iou")
ENCODER_NAMES = ("plain",) + tuple(f"efficientnet_b{i}" for i in range(8))

RUNS_DB_DEFAULT = os.path.join("runs", "icpolypseg.db")


def _check_scale_mode(value: str, what: str) -> None:
    if value not in SCALE_MODES:
        raise ContractViolation(f"{what} must be one of {SCALE_MODES}, got {value!r}")


@dataclass
class RFEConfig:
    in_channels: int
    out_channels: int = 32
    branch_kernels: List[int] = field(default_factory=lambda: [1, 3, 5, 7])
    use_norm_act: bool = True

    def validate(self) -> None:
        if self.in_channels < 1 or self.out_channels < 1:
            raise ContractViolation(f"RFE channels must be positive, got {self.in_channels}->{self.out_channels}")
        if not self.branch_kernels or self.branch_kernels[0] != 1:
            raise ContractViolation(f"first RFE branch kernel must be 1, got {self.branch_kernels}")
        for k in self.branch_kernels:
            if k < 1 or k % 2 == 0:
                raise ContractViolation(f"RFE branch kernels must be odd and >= 1, got {self.branch_kernels}")


@dataclass
class EncoderSpec:
    name: str = "plain"
    stage_channels: List[int] = field(default_factory=lambda: [16, 24, 32, 64, 96])
    # five stride-2 stages: cumulative strides 2, 4, 8, 16, 32
    stage_strides: List[int] = field(default_factory=lambda: [2, 2, 2, 2, 2])

    def validate(self) -> None:
        if self.name not in ENCODER_NAMES:
            raise ContractViolation(f"unknown encoder {self.name!r}; choose from {ENCODER_NAMES}")
        if len(self.stage_channels) != 5 or any(c < 1 for c in self.stage_channels):
            raise ContractViolation(f"encoder needs 5 positive stage channels, got {self.stage_channels}")
        if list(self.stage_strides) != [2, 2, 2, 2, 2]:
            raise ContractViolation(f"encoder stage strides are fixed to [2, 2, 2, 2, 2], got {self.stage_strides}")


@dataclass
class CFCConfig:
    stages: int = 4
    stage_width: int = 32
    kernel: int = 3
    pool: int = 2
    zero_init_residual_head: bool = True
    scale_mode: str = "raw"

    def validate(self) -> None:
        if (self.stages, self.stage_width, self.kernel, self.pool) != (4, 32, 3, 2):
            raise ContractViolation("CFC is fixed to 4 stages, 32 filters, 3x3 kernels and 2x2 pooling")
        _check_scale_mode(self.scale_mode, "cfc.scale_mode")


@dataclass
class ModelConfig:
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    decoder_width: int = 32
    input_size: int = 352
    use_pfr: bool = True
    use_cpfr: bool = True
    use_cfc: bool = True
    pfr_scale_mode: str = "raw"
    cpfr_scale_mode: str = "raw"
    use_norm_act: bool = True
    cfc: CFCConfig = field(default_factory=CFCConfig)

    def validate(self) -> None:
        self.encoder.validate()
        self.cfc.validate()
        if self.decoder_width < 1:
            raise ContractViolation(f"decoder_width must be positive, got {self.decoder_width}")
        if self.input_size < 32 or self.input_size % 32:
            raise ContractViolation(f"input_size must be a positive multiple of 32, got {self.input_size}")
        _check_scale_mode(self.pfr_scale_mode, "pfr_scale_mode")
        _check_scale_mode(self.cpfr_scale_mode, "cpfr_scale_mode")


@dataclass
class LossConfig:
    weight_kernel: int = 31
    weight_gain: float = 5.0
    terms: List[str] = field(default_factory=lambda: list(LOSS_TERMS))
    supervision_weights: Dict[str, float] = field(default_factory=lambda: {h: 1.0 for h in HEAD_NAMES})

    def validate(self) -> None:
        if self.weight_kernel < 1 or self.weight_kernel % 2 == 0:
            raise ContractViolation(f"weight_kernel must be odd, got {self.weight_kernel}")
        if self.weight_gain < 0:
            raise ContractViolation(f"weight_gain must be >= 0, got {self.weight_gain}")
        if not self.terms:
            raise ContractViolation("at least one loss term must be enabled")
        unknown = [t for t in self.terms if t not in LOSS_TERMS]
        if unknown:
            raise ContractViolation(f"unknown loss terms {unknown}; choose from {LOSS_TERMS}")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 100
    early_stop_patience: int = 10
    seed: int = 0
    # decoupled weight decay with adaptive moments
    optimizer: str = "adamw"
    scales: List[float] = field(default_factory=lambda: [0.75, 1.0, 1.25])
    grad_clip: Optional[float] = None
    deterministic: bool = False
    val_fraction: float = 0.1
    desk_preset: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def validate(self) -> None:
        if self.lr < 0:
            raise ContractViolation(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ContractViolation("batch_size and max_epochs must be positive")
        if not 0 < self.early_stop_patience < self.max_epochs:
            raise ContractViolation(
                f"early_stop_patience must be in (0, max_epochs), got {self.early_stop_patience} / {self.max_epochs}"
            )
        if self.optimizer != "adamw":
            raise ContractViolation(f"optimizer is fixed to 'adamw', got {self.optimizer!r}")
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ContractViolation(f"scales must be positive ratios, got {self.scales}")
        if not 0 < self.val_fraction < 1:
            raise ContractViolation(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        self.model.validate()
        self.loss.validate()

    @classmethod
    def desk(cls, **overrides: Any) -> "TrainConfig":
        """CPU-sized preset: tiny plain encoder, 96 px canvas, batch 4, 30 epochs."""
        model = ModelConfig(
            encoder=EncoderSpec(),
            input_size=96,
            pfr_scale_mode="inv_chw",
            cpfr_scale_mode="inv_chw",
            cfc=CFCConfig(scale_mode="inv_chw"),
        )
        cfg = cls(batch_size=4, max_epochs=30, desk_preset=True, model=model)
        for key, value in overrides.items():
            setattr(cfg, key, value)
        return cfg


@dataclass
class SynthConfig:
    count: int = 200
    canvas: int = 96
    blob_count_range: List[int] = field(default_factory=lambda: [1, 3])
    blob_radius_range: List[float] = field(default_factory=lambda: [0.1, 0.22])
    boundary_jitter: float = 0.15
    texture_noise: float = 0.08
    seed: int = 0

    def validate(self) -> None:
        if self.canvas < 32:
            raise ContractViolation(f"canvas must be >= 32, got {self.canvas}")
        lo, hi = self.blob_count_range
        if not 1 <= lo <= hi:
            raise ContractViolation(f"blob_count_range must satisfy 1 <= lo <= hi, got {self.blob_count_range}")
        rlo, rhi = self.blob_radius_range
        if not 0 < rlo <= rhi < 0.5:
            raise ContractViolation(f"blob_radius_range must lie in (0, 0.5), got {self.blob_radius_range}")
        if not 0 <= self.boundary_jitter < 1:
            raise ContractViolation(f"boundary_jitter must be in [0, 1), got {self.boundary_jitter}")
        if self.texture_noise < 0:
            raise ContractViolation(f"texture_noise must be >= 0, got {self.texture_noise}")


# --- dict / JSON round-trip ---

def to_dict(cfg: Any) -> Dict[str, Any]:
    return asdict(cfg)


def _matches(value: Any, hint: Any) -> bool:
    if hint is Any:
        return True
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        return any(_matches(value, h) for h in typing.get_args(hint))
    if hint is type(None):
        return value is None
    if hint is bool:
        return isinstance(value, bool)
    if hint is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if hint is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if origin in (list, List):
        (item,) = typing.get_args(hint) or (Any,)
        return isinstance(value, list) and all(_matches(v, item) for v in value)
    if origin in (dict, Dict):
        key, item = typing.get_args(hint) or (Any, Any)
        return isinstance(value, dict) and all(_matches(k, key) and _matches(v, item) for k, v in value.items())
    if isinstance(hint, type):
        return isinstance(value, hint)
    return True


def from_dict(cls: type, data: Dict[str, Any]) -> Any:
    if not isinstance(data, dict):
        raise ContractViolation(f"{cls.__name__} expects an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ContractViolation(f"unknown {cls.__name__} keys: {unknown}")
    kwargs: Dict[str, Any] = {}
    for name, value in data.items():
        hint = hints.get(name)
        if is_dataclass(hint):
            value = from_dict(hint, value)
        elif hint is not None and not _matches(value, hint):
            raise ContractViolation(f"{cls.__name__}.{name} must be {_hint_name(hint)}, got {value!r}")
        kwargs[name] = value
    return cls(**kwargs)


def _hint_name(hint: Any) -> str:
    return hint.__name__ if isinstance(hint, type) else str(hint).replace("typing.", "")


def apply_overrides(data: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Set leaf keys by dotted path, e.g. {"model.decoder_width": 16}."""
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = data
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ContractViolation(f"override {dotted!r}: {part!r} is not a config section")
            node = node[part]
        if parts[-1] not in node:
            raise ContractViolation(f"override {dotted!r}: unknown key {parts[-1]!r}")
        node[parts[-1]] = value
    return data


def parse_override(text: str) -> tuple:
    """'a.b=3' -> ('a.b', 3). Values are JSON when they parse, strings otherwise."""
    if "=" not in text:
        raise ContractViolation(f"override must look like key.path=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw
    return key.strip(), value


def load_config(cls: type, base: Any = None, path: Optional[str] = None,
                overrides: Optional[Dict[str, Any]] = None) -> Any:
    """defaults (or `base`) < JSON file < dotted overrides."""
    data = to_dict(base if base is not None else cls())
    if path:
        with open(path, "r", encoding="utf-8") as f:
            file_data = json.load(f)
        data = _deep_merge(data, file_data)
    if overrides:
        data = apply_overrides(data, overrides)
    return from_dict(cls, data)


def save_config(cfg: Any, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(to_dict(cfg), f, indent=2, sort_keys=True)


def _deep_merge(base: Dict[str, Any], extra: Dict[str, Any]) -> Dict[str, Any]:
    out = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


# --- environment ---

def env_str(name: str, default: str = "") -> str:
    return (os.getenv(name, "") or default).strip()


def data_root_default() -> Optional[str]:
    return env_str("ICPOLYP_DATA_ROOT") or None


def runs_db_path() -> str:
    return os.path.abspath(env_str("ICPOLYP_RUNS_DB", RUNS_DB_DEFAULT))
