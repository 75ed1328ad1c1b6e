import io
import json
import struct
import logging
from dataclasses import dataclass, field
from typing import Optional, Dict, List, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .blocks import RFE, PFR, CPFR
from .config import ModelConfig, EncoderSpec, CFCConfig, RFEConfig, to_dict, from_dict
from .errors import ContractViolation, NonFiniteError, CheckpointError

log = logging.getLogger("icpolypseg.network")

CKPT_MAGIC = b"ICPS1\n"

# torchvision EfficientNet `features` indices whose outputs sit at strides 2, 4, 8, 16, 32
EFFICIENTNET_TAPS = (1, 2, 3, 5, 7)


def _check_finite(name: str, t: torch.Tensor) -> None:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite values in {name}", stage=name)


def _upsample(x: torch.Tensor, size) -> torch.Tensor:
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


def _stage_area(input_size: Optional[int], halvings: int) -> Optional[int]:
    return (input_size >> halvings) ** 2 if input_size else None


def conv_bn_relu(in_channels: int, out_channels: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(inplace=True),
    )


# ---------------------------
# Encoders
# ---------------------------

class PlainEncoder(nn.Module):
    """Five stride-2 stages of two 3x3 conv + BN + ReLU."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        stages = []
        cin = 3
        for cout in spec.stage_channels:
            stages.append(nn.Sequential(conv_bn_relu(cin, cout, stride=2), conv_bn_relu(cout, cout)))
            cin = cout
        self.stages = nn.ModuleList(stages)
        self.out_channels = list(spec.stage_channels)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class EfficientNetEncoder(nn.Module):
    """torchvision EfficientNet topology, randomly initialized, tapped at five strides."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        from torchvision import models

        factory = getattr(models, spec.name)
        self.features = factory(weights=None).features[: EFFICIENTNET_TAPS[-1] + 1]
        was_training = self.features.training
        self.features.eval()
        with torch.no_grad():
            probe = self._tap(torch.zeros(1, 3, 64, 64))
        self.features.train(was_training)
        self.out_channels = [int(f.shape[1]) for f in probe]

    def _tap(self, x: torch.Tensor) -> List[torch.Tensor]:
        feats = []
        for i, block in enumerate(self.features):
            x = block(x)
            if i in EFFICIENTNET_TAPS:
                feats.append(x)
        return feats

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        return self._tap(x)


def build_encoder(spec: EncoderSpec) -> nn.Module:
    if spec.name == "plain":
        return PlainEncoder(spec)
    enc = EfficientNetEncoder(spec)
    spec.stage_channels = list(enc.out_channels)
    return enc


# ---------------------------
# Prediction set
# ---------------------------

@dataclass
class PredictionSet:
    """Full-resolution probability maps per head (p5..p2, plus p1 when the CFC is on)."""

    probs: Dict[str, torch.Tensor]
    logits: Optional[Dict[str, torch.Tensor]] = None
    features: Dict[str, torch.Tensor] = field(default_factory=dict)

    @classmethod
    def from_logits(cls, logits: Dict[str, torch.Tensor], features: Optional[Dict[str, torch.Tensor]] = None):
        probs = {name: torch.sigmoid(t) for name, t in logits.items()}
        return cls(probs=probs, logits=logits, features=features or {})

    def heads(self) -> List[str]:
        return list(self.probs.keys())

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.probs[name]

    def __contains__(self, name: str) -> bool:
        return name in self.probs

    @property
    def final(self) -> torch.Tensor:
        """p1 when present, else p2."""
        return self.probs["p1"] if "p1" in self.probs else self.probs["p2"]


# ---------------------------
# Coarse-to-fine calibration
# ---------------------------

class CFC(nn.Module):
    """Residual refiner over the coarse p2 logit map.

    Encoder stage k: 3x3 conv(32) + BN + ReLU then 2x2 max-pool (four halvings). Decoder
    stage 4 upsamples the pooled bottom, joins encoder stage 4 and runs RFE + PFR; stages
    3..1 upsample and fuse with RFE(encoder stage k) through CPFR. A 3x3 head emits P_res.
    """

    def __init__(self, cfg: CFCConfig, use_norm_act: bool = True, input_size: Optional[int] = None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        w = cfg.stage_width
        self.enc = nn.ModuleList([conv_bn_relu(1 if k == 0 else w, w) for k in range(cfg.stages)])
        self.pool = nn.MaxPool2d(cfg.pool, cfg.pool)
        self.rfe = nn.ModuleDict({"4": RFE(RFEConfig(2 * w, w, use_norm_act=use_norm_act))})
        for k in ("3", "2", "1"):
            self.rfe[k] = RFE(RFEConfig(w, w, use_norm_act=use_norm_act))
        # decoder stage k runs at input_size / 2^(k-1)
        self.pfr = PFR(w, cfg.scale_mode, spatial=_stage_area(input_size, 3))
        self.cpfr = nn.ModuleDict({
            str(k): CPFR(w, cfg.scale_mode, spatial=_stage_area(input_size, k - 1)) for k in (3, 2, 1)
        })
        self.residual_head = nn.Conv2d(w, 1, cfg.kernel, padding=cfg.kernel // 2)
        if cfg.zero_init_residual_head:
            nn.init.zeros_(self.residual_head.weight)
            nn.init.zeros_(self.residual_head.bias)

    def residual(self, coarse_logits: torch.Tensor) -> torch.Tensor:
        if coarse_logits.dim() != 4 or coarse_logits.shape[1] != 1:
            raise ContractViolation(f"cfc expects (N, 1, S, S) logits, got {tuple(coarse_logits.shape)}")
        s = coarse_logits.shape[-2:]
        if s[0] % 16 or s[1] % 16:
            raise ContractViolation(f"cfc input size must be divisible by 16, got {tuple(s)}")
        skips = []
        x = coarse_logits
        for conv in self.enc:
            x = conv(x)
            skips.append(x)
            x = self.pool(x)
        up = _upsample(x, skips[3].shape[-2:])
        h = self.pfr(self.rfe["4"](torch.cat([up, skips[3]], dim=1)))
        for k in (3, 2, 1):
            up = _upsample(h, skips[k - 1].shape[-2:])
            h = self.cpfr[str(k)](self.rfe[str(k)](skips[k - 1]), up)
        return self.residual_head(h)

    def forward(self, coarse_logits: torch.Tensor) -> torch.Tensor:
        """Refined logits P2 + P_res."""
        return coarse_logits + self.residual(coarse_logits)


def cfc_forward(cfc: CFC, coarse_logits: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(cfc(coarse_logits))


# ---------------------------
# Full model
# ---------------------------

class ICPolypSeg(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c = cfg.decoder_width
        self.encoder = build_encoder(cfg.encoder)
        enc_ch = cfg.encoder.stage_channels
        # stage 1 is never consumed
        self.rfe = nn.ModuleDict({
            str(i): RFE(RFEConfig(enc_ch[i - 1], c, use_norm_act=cfg.use_norm_act)) for i in (2, 3, 4, 5)
        })
        s = cfg.input_size
        self.pfr = PFR(c, cfg.pfr_scale_mode, spatial=_stage_area(s, 5)) if cfg.use_pfr else None
        if cfg.use_cpfr:
            self.cpfr = nn.ModuleDict({
                str(i): CPFR(c, cfg.cpfr_scale_mode, spatial=_stage_area(s, i)) for i in (4, 3, 2)
            })
            self.fuse = None
        else:
            self.cpfr = None
            self.fuse = nn.ModuleDict({str(i): nn.Conv2d(2 * c, c, 1) for i in (4, 3, 2)})
        self.heads = nn.ModuleDict({f"p{i}": nn.Conv2d(c, 1, 1) for i in (5, 4, 3, 2)})
        self.cfc = CFC(cfg.cfc, use_norm_act=cfg.use_norm_act, input_size=s) if cfg.use_cfc else None

    def _check_images(self, images: torch.Tensor, strict_size: bool) -> None:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ContractViolation(f"images must be (N, 3, S, S), got {tuple(images.shape)}")
        h, w = images.shape[-2:]
        if strict_size:
            if (h, w) != (self.cfg.input_size, self.cfg.input_size):
                raise ContractViolation(
                    f"images must be {self.cfg.input_size}x{self.cfg.input_size}, got {h}x{w}"
                )
        elif h % 32 or w % 32:
            raise ContractViolation(f"image size must be a multiple of 32, got {h}x{w}")

    def decode(self, feats: List[torch.Tensor]) -> Dict[int, torch.Tensor]:
        """Encoder pyramid -> decoder stage features {5, 4, 3, 2}."""
        r = {}
        for i in (2, 3, 4, 5):
            r[i] = self.rfe[str(i)](feats[i - 1])
            _check_finite(f"rfe{i}", r[i])
        d = self.pfr(r[5]) if self.pfr is not None else r[5]
        _check_finite("stage5", d)
        stages = {5: d}
        for i in (4, 3, 2):
            up = _upsample(d, r[i].shape[-2:])
            if self.cpfr is not None:
                d = self.cpfr[str(i)](r[i], up)
            else:
                d = self.fuse[str(i)](torch.cat([r[i], up], dim=1))
            _check_finite(f"stage{i}", d)
            stages[i] = d
        return stages

    def forward(self, images: torch.Tensor, strict_size: Optional[bool] = None,
                return_features: bool = False) -> PredictionSet:
        if strict_size is None:
            strict_size = not self.training
        self._check_images(images, strict_size)
        feats = self.encoder(images)
        stages = self.decode(feats)
        size = images.shape[-2:]
        logits = {}
        for i in (5, 4, 3, 2):
            logits[f"p{i}"] = _upsample(self.heads[f"p{i}"](stages[i]), size)
        if self.cfc is not None:
            logits["p1"] = self.cfc(logits["p2"])
            _check_finite("cfc", logits["p1"])
        features = {}
        if return_features:
            features = {f"enc{k + 1}": f for k, f in enumerate(feats)}
            features.update({f"stage{i}": t for i, t in stages.items()})
        return PredictionSet.from_logits(logits, features)


def build_model(cfg: ModelConfig, seed: int = 0) -> ICPolypSeg:
    """Deterministic construction: same (cfg, seed) -> bit-identical parameters."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ICPolypSeg(cfg)


def parameter_vector(model: nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()])


# ---------------------------
# Checkpoints
# ---------------------------

def save_checkpoint(model: ICPolypSeg, path: str, extra: Optional[dict] = None) -> None:
    """Flat name -> little-endian float32 arrays behind a JSON header holding the ModelConfig."""
    entries = []
    payload = io.BytesIO()
    for name, tensor in model.state_dict().items():
        arr = np.ascontiguousarray(tensor.detach().cpu().to(torch.float32).numpy(), dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": payload.tell(), "numel": int(arr.size)})
        payload.write(arr.tobytes(order="C"))
    header = json.dumps(
        {"config": to_dict(model.cfg), "tensors": entries, "extra": extra or {}},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(payload.getvalue())


def read_checkpoint(path: str) -> Tuple[dict, Dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: not an icpolypseg checkpoint")
    pos = len(CKPT_MAGIC)
    (hlen,) = struct.unpack("<Q", blob[pos:pos + 8])
    pos += 8
    header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    arrays = {}
    for e in header["tensors"]:
        start = pos + e["offset"]
        arr = np.frombuffer(blob, dtype="<f4", count=e["numel"], offset=start)
        arrays[e["name"]] = arr.reshape(e["shape"]).copy()
    return header, arrays


def load_checkpoint(path: str, model: Optional[ICPolypSeg] = None) -> ICPolypSeg:
    header, arrays = read_checkpoint(path)
    if model is None:
        model = build_model(from_dict(ModelConfig, header["config"]), seed=0)
    expected = model.state_dict()
    mismatches = []
    for name in sorted(set(expected) - set(arrays)):
        mismatches.append(f"missing {name}")
    for name in sorted(set(arrays) - set(expected)):
        mismatches.append(f"unexpected {name}")
    for name in sorted(set(arrays) & set(expected)):
        if tuple(arrays[name].shape) != tuple(expected[name].shape):
            mismatches.append(f"shape {name}: checkpoint {tuple(arrays[name].shape)} vs model {tuple(expected[name].shape)}")
    if mismatches:
        raise CheckpointError(f"{path}: {len(mismatches)} mismatches: " + "; ".join(mismatches), mismatches)
    state = {name: torch.from_numpy(arrays[name]).to(expected[name].dtype) for name in expected}
    model.load_state_dict(state)
    log.info("loaded checkpoint %s (%d tensors)", path, len(state))
    return model
