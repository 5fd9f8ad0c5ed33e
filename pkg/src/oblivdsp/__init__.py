"""Data-oblivious, depth-bounded radar DSP over CKKS slot vectors."""

from .ckks import CkksParams
from .config import Config
from .formats import RadarCube, read_cube, write_cube
from .vm import SlotVM, TraceRecord, trace_equals

__version__ = "0.1.0"

__all__ = [
    "CkksParams",
    "Config",
    "RadarCube",
    "SlotVM",
    "TraceRecord",
    "read_cube",
    "trace_equals",
    "write_cube",
]
