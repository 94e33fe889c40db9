"""Return-instruction obfuscation lab for a Thumb firmware subset.

Modules: isa (codec), machine (interpreter oracle), image (corpus and
rewriting), obfuscation (transform and boot scan), attack (recovery and
gadget catalog), harden (padding, push sealing, slot rotation), cli.
"""

__version__ = "0.1.0"

from .image import CorpusParams, FirmwareImage, FunctionRecord, Manifest
from .isa import Instruction, RegisterList, decode, encode, is_return

__all__ = [
    "CorpusParams",
    "FirmwareImage",
    "FunctionRecord",
    "Instruction",
    "Manifest",
    "RegisterList",
    "decode",
    "encode",
    "is_return",
    "__version__",
]
