from .rfe import RFE, ConvUnit, rfe_forward
from .redistribution import PFR, CPFR, pfr_forward, cpfr_forward, holistic_kernel, allocate

__all__ = [
    "RFE", "ConvUnit", "rfe_forward",
    "PFR", "CPFR", "pfr_forward", "cpfr_forward", "holistic_kernel", "allocate",
]
