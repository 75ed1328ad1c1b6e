import time
import logging
import platform
import statistics
from dataclasses import dataclass, asdict
from typing import Tuple, Union

import torch
from torch import nn

from .errors import ContractViolation

log = logging.getLogger("icpolypseg.profiler")

WARMUP_RUNS = 5
MIN_TIMED_RUNS = 30


@dataclass
class ProfileResult:
    param_count: int
    mac_count: int
    fps: float
    input_size: int
    hardware: str

    @property
    def params_m(self) -> float:
        return self.param_count / 1e6

    @property
    def macs_g(self) -> float:
        return self.mac_count / 1e9

    def to_dict(self) -> dict:
        d = asdict(self)
        d["params_m"] = round(self.params_m, 4)
        d["macs_g"] = round(self.macs_g, 4)
        return d


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def _conv_macs(module: nn.Conv2d, output: torch.Tensor) -> int:
    kh, kw = module.kernel_size
    per_output = kh * kw * (module.in_channels // module.groups)
    return per_output * output.numel()


def _run(model: nn.Module, x: torch.Tensor):
    # profiling sizes may differ from the configured input size
    from .network import ICPolypSeg
    if isinstance(model, ICPolypSeg):
        return model(x, strict_size=False)
    return model(x)


def _dummy_input(model: nn.Module, shape: Union[int, Tuple[int, ...]]) -> torch.Tensor:
    if isinstance(shape, int):
        shape = (1, 3, shape, shape)
    if len(shape) != 4:
        raise ContractViolation(f"input shape must be (N, C, H, W), got {shape}")
    param = next(model.parameters(), None)
    dtype = param.dtype if param is not None else torch.float32
    return torch.zeros(shape, dtype=dtype)


def count_macs(model: nn.Module, input_shape: Union[int, Tuple[int, ...]]) -> int:
    """Multiply-accumulates of one forward pass.

    Conv2d and Linear layers count kernel volume times output elements. Modules that
    expose `matmul_macs(*inputs)` add their own matrix-product work.
    """
    total = [0]

    def conv_hook(module, inputs, output):
        total[0] += _conv_macs(module, output)

    def linear_hook(module, inputs, output):
        total[0] += module.in_features * output.numel()

    def matmul_hook(module, inputs, output):
        total[0] += int(module.matmul_macs(*inputs))

    handles = []
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            handles.append(m.register_forward_hook(conv_hook))
        elif isinstance(m, nn.Linear):
            handles.append(m.register_forward_hook(linear_hook))
        if hasattr(m, "matmul_macs"):
            handles.append(m.register_forward_hook(matmul_hook))

    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            _run(model, _dummy_input(model, input_shape))
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    return total[0]


def hardware_stamp() -> str:
    cpu = platform.processor() or platform.machine() or "unknown-cpu"
    return f"{cpu} | {platform.system()} {platform.release()} | python {platform.python_version()} | torch {torch.__version__} | 1 thread"


def measure_fps(model: nn.Module, input_size: int, runs: int = MIN_TIMED_RUNS, warmup: int = WARMUP_RUNS) -> float:
    """Single-image, single-thread throughput: 1 / median latency over `runs` timed passes."""
    if runs < MIN_TIMED_RUNS:
        raise ContractViolation(f"need at least {MIN_TIMED_RUNS} timed runs, got {runs}")
    x = _dummy_input(model, input_size)
    threads = torch.get_num_threads()
    was_training = model.training
    model.eval()
    torch.set_num_threads(1)
    try:
        timings = []
        with torch.no_grad():
            for _ in range(warmup):
                _run(model, x)
            for _ in range(runs):
                t0 = time.perf_counter()
                _run(model, x)
                timings.append(time.perf_counter() - t0)
    finally:
        torch.set_num_threads(threads)
        model.train(was_training)
    median = statistics.median(timings)
    return 1.0 / median if median > 0 else float("inf")


def profile(model: nn.Module, input_size: int, runs: int = MIN_TIMED_RUNS, warmup: int = WARMUP_RUNS) -> ProfileResult:
    result = ProfileResult(
        param_count=count_params(model),
        mac_count=count_macs(model, input_size),
        fps=measure_fps(model, input_size, runs=runs, warmup=warmup),
        input_size=input_size,
        hardware=hardware_stamp(),
    )
    log.info("profile @%d: %.3fM params, %.3fG MACs, %.1f FPS", input_size, result.params_m, result.macs_g, result.fps)
    return result
