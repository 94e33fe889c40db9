"""Firmware image container, ground-truth manifest, and corpus generator.

The corpus is synthetic: calling-convention-conforming functions with known
prologues, bodies, and epilogues, giving exact ground truth with no
toolchain dependency.  The manifest is the evaluator's ground truth and is
never shown to the attack pipeline.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from pathlib import Path

from ._rewrite import BlobItem, InsnItem, Program, RewriteError, TrampolineItem, lift
from .isa import (
    AddReg,
    AddSpImm,
    Bl,
    BxLr,
    LdrSpRel,
    MovImm,
    MovReg,
    Pop,
    Push,
    RegisterList,
    StrSpRel,
    SubReg,
    SubSpImm,
)

#: Default memory map.  Flash and scratch RAM are kept within branch range
#: of each other so table entries can branch back into code.
DEFAULT_BASE = 0x00040000
DEFAULT_SRAM_BASE = 0x00240000
DEFAULT_TABLE_BASE = DEFAULT_SRAM_BASE

MAX_IMAGE_SIZE = 0x40000


class ImageError(Exception):
    """Validation failure in an image/manifest pair."""


@dataclass
class FirmwareImage:
    base: int
    data: bytes
    sram_base: int = DEFAULT_SRAM_BASE
    table_base: int = DEFAULT_TABLE_BASE

    def __post_init__(self):
        if self.base % 4 or self.table_base % 4:
            raise ImageError("base addresses must be word-aligned")
        if len(self.data) % 2:
            raise ImageError("image length must be even")

    @property
    def end(self) -> int:
        return self.base + len(self.data)

    def sha256(self) -> str:
        return hashlib.sha256(self.data).hexdigest()


@dataclass
class FunctionRecord:
    name: str
    start: int
    end: int
    prologue_site: int | None
    epilogue_sites: list[int]
    true_pop: RegisterList | None  # None for leaf functions (bx lr return)
    used_callee_saved: RegisterList
    pad_registers: RegisterList = RegisterList(0)

    @property
    def is_leaf(self) -> bool:
        return self.true_pop is None

    def validate(self) -> None:
        if self.start >= self.end:
            raise ImageError(f"{self.name}: empty or inverted range")
        for site in self.epilogue_sites:
            if not self.start <= site < self.end:
                raise ImageError(f"{self.name}: epilogue site outside range")
        if self.true_pop is not None and not self.true_pop.has_pc:
            raise ImageError(f"{self.name}: true_pop lacks pc")

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "start": f"0x{self.start:x}",
            "end": f"0x{self.end:x}",
            "prologue_site": None if self.prologue_site is None else f"0x{self.prologue_site:x}",
            "epilogue_sites": [f"0x{s:x}" for s in self.epilogue_sites],
            "true_pop": None if self.true_pop is None else list(self.true_pop.names()),
            "used_callee_saved": list(self.used_callee_saved.names()),
            "pad_registers": list(self.pad_registers.names()),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FunctionRecord":
        return cls(
            name=obj["name"],
            start=int(obj["start"], 16),
            end=int(obj["end"], 16),
            prologue_site=None
            if obj["prologue_site"] is None
            else int(obj["prologue_site"], 16),
            epilogue_sites=[int(s, 16) for s in obj["epilogue_sites"]],
            true_pop=None if obj["true_pop"] is None else RegisterList.from_names(obj["true_pop"]),
            used_callee_saved=RegisterList.from_names(obj["used_callee_saved"]),
            pad_registers=RegisterList.from_names(obj["pad_registers"]),
        )


@dataclass
class Manifest:
    base: int
    sram_base: int
    table_base: int
    seed: int
    functions: list[FunctionRecord]
    transform_log: list[dict] = field(default_factory=list)

    def validate(self, image: FirmwareImage | None = None) -> None:
        prev_end = None
        ordered = sorted(self.functions, key=lambda f: f.start)
        if [f.name for f in ordered] != [f.name for f in self.functions]:
            raise ImageError("functions not sorted by address")
        for fn in self.functions:
            fn.validate()
            if prev_end is not None and fn.start < prev_end:
                raise ImageError(f"{fn.name}: overlaps previous function")
            prev_end = fn.end
        if image is not None:
            for fn in self.functions:
                if fn.end > image.end or fn.start < image.base:
                    raise ImageError(f"{fn.name}: extends past image end")
            if (self.base, self.sram_base, self.table_base) != (
                image.base,
                image.sram_base,
                image.table_base,
            ):
                raise ImageError("manifest/image address fields disagree")
            recorded = self.latest_sha()
            if recorded is not None and recorded != image.sha256():
                raise ImageError("image checksum does not match manifest lineage")

    def record_pass(self, image: FirmwareImage, name: str, **params) -> None:
        entry = {"pass": name, **params, "image_sha256": image.sha256()}
        self.transform_log.append(entry)

    def latest_sha(self) -> str | None:
        for entry in reversed(self.transform_log):
            if "image_sha256" in entry:
                return entry["image_sha256"]
        return None

    def trampoline_records(self):
        from ._rewrite import TrampolineRecord

        for entry in reversed(self.transform_log):
            if "sites" in entry:
                return [TrampolineRecord.from_json(obj) for obj in entry["sites"]]
        return []

    def has_pass(self, name: str) -> bool:
        return any(entry.get("pass") == name for entry in self.transform_log)

    def fn(self, name: str) -> FunctionRecord:
        for record in self.functions:
            if record.name == name:
                return record
        raise KeyError(name)

    def to_json(self) -> dict:
        return {
            "base": f"0x{self.base:x}",
            "sram_base": f"0x{self.sram_base:x}",
            "table_base": f"0x{self.table_base:x}",
            "seed": self.seed,
            "functions": [fn.to_json() for fn in self.functions],
            "transform_log": self.transform_log,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Manifest":
        return cls(
            base=int(obj["base"], 16),
            sram_base=int(obj["sram_base"], 16),
            table_base=int(obj["table_base"], 16),
            seed=int(obj["seed"]),
            functions=[FunctionRecord.from_json(o) for o in obj["functions"]],
            transform_log=list(obj["transform_log"]),
        )


@dataclass
class CorpusParams:
    function_count: int = 200
    #: Weights for drawing how many callee-saved registers a function uses.
    callee_count_weights: tuple = (0.2, 0.25, 0.25, 0.2, 0.1)
    #: Probability a function may draw from r8-r11 as well as r4-r7.
    high_reg_prob: float = 0.15
    body_len: tuple = (6, 16)
    leaf_ratio: float = 0.2
    multi_epilogue_prob: float = 0.0
    local_frame_prob: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        if self.function_count < 0:
            raise ImageError("function_count must be non-negative")
        for p in (self.high_reg_prob, self.leaf_ratio, self.multi_epilogue_prob,
                  self.local_frame_prob):
            if not 0.0 <= p <= 1.0:
                raise ImageError(f"probability out of range: {p}")
        if not self.callee_count_weights or min(self.callee_count_weights) < 0:
            raise ImageError("bad callee_count_weights")
        if self.body_len[0] < 4 or self.body_len[0] > self.body_len[1]:
            raise ImageError("bad body_len range")

    def to_json(self) -> dict:
        return {
            "function_count": self.function_count,
            "callee_count_weights": list(self.callee_count_weights),
            "high_reg_prob": self.high_reg_prob,
            "body_len": list(self.body_len),
            "leaf_ratio": self.leaf_ratio,
            "multi_epilogue_prob": self.multi_epilogue_prob,
            "local_frame_prob": self.local_frame_prob,
            "seed": self.seed,
        }


_SCRATCH = (0, 1, 2, 3)


def _write_reg_unit(rng: random.Random, reg: int) -> list:
    """Instructions that write ``reg`` (a callee-saved register)."""
    if reg <= 7:
        pick = rng.randrange(3)
        if pick == 0:
            return [MovImm(reg, rng.randrange(256))]
        if pick == 1:
            return [AddReg(reg, rng.choice(_SCRATCH), rng.choice(_SCRATCH))]
        return [SubReg(reg, rng.choice(_SCRATCH), rng.choice(_SCRATCH))]
    scratch = rng.choice(_SCRATCH)
    return [MovImm(scratch, rng.randrange(256)), MovReg(reg, scratch)]


def _scratch_unit(rng: random.Random) -> list:
    pick = rng.randrange(4)
    if pick == 0:
        return [MovImm(rng.choice(_SCRATCH), rng.randrange(256))]
    if pick == 1:
        return [AddReg(rng.choice(_SCRATCH), rng.choice(_SCRATCH), rng.choice(_SCRATCH))]
    if pick == 2:
        return [SubReg(rng.choice(_SCRATCH), rng.choice(_SCRATCH), rng.choice(_SCRATCH))]
    return [MovReg(12, rng.choice(_SCRATCH))]


def _frame_unit(rng: random.Random) -> list:
    words = rng.randrange(1, 5)
    slot = 4 * rng.randrange(words)
    reg = rng.choice(_SCRATCH)
    return [
        SubSpImm(words * 4),
        StrSpRel(reg, slot),
        LdrSpRel(rng.choice(_SCRATCH), slot),
        AddSpImm(words * 4),
    ]


def _body_units(
    rng: random.Random,
    p: CorpusParams,
    write_regs: tuple[int, ...],
    leaf: bool,
    callee_pool: list[int],
) -> list[list]:
    units = [_write_reg_unit(rng, reg) for reg in write_regs]
    if not leaf:
        calls = 1 + (1 if rng.random() < 0.3 else 0)
        units.extend([("bl", ("fn", rng.choice(callee_pool)))] for _ in range(calls))
        if rng.random() < p.local_frame_prob:
            units.append(_frame_unit(rng))
    target = rng.randint(*p.body_len)
    while sum(len(u) for u in units) < target:
        units.append(_scratch_unit(rng))
    rng.shuffle(units)
    return units


def generate_corpus(params: CorpusParams) -> tuple[FirmwareImage, Manifest]:
    """Produce a synthetic firmware image plus its ground-truth manifest."""
    params.validate()
    rng = random.Random(params.seed)

    is_leaf = [rng.random() < params.leaf_ratio for _ in range(params.function_count)]
    if params.function_count and not all(is_leaf) and not any(is_leaf):
        is_leaf[rng.randrange(params.function_count)] = True
    leaf_indices = [i for i, flag in enumerate(is_leaf) if flag]

    plans = []
    for i in range(params.function_count):
        if is_leaf[i]:
            plans.append((i, True, RegisterList(0), False))
            continue
        count = rng.choices(
            range(len(params.callee_count_weights)), params.callee_count_weights
        )[0]
        pool = list(range(4, 12)) if rng.random() < params.high_reg_prob else list(range(4, 8))
        regs = RegisterList.of(*rng.sample(pool, min(count, len(pool))))
        multi = rng.random() < params.multi_epilogue_prob
        plans.append((i, False, regs, multi))

    prog = Program(DEFAULT_BASE)
    fn_items: list[dict] = []
    for i, leaf, regs, multi in plans:
        info = {"first": len(prog.items), "prologue": None, "epilogues": []}
        if leaf:
            for unit in _body_units(rng, params, (), True, leaf_indices):
                for insn in unit:
                    prog.add(InsnItem(insn))
            info["epilogues"].append(prog.add(InsnItem(BxLr()), label=None))
        else:
            push = Push(regs.union(RegisterList.of("lr")))
            pop = Pop(regs.union(RegisterList.of("pc")))
            info["prologue"] = prog.add(InsnItem(push))
            segments = 2 if multi else 1
            for seg in range(segments):
                # Every callee-saved register is written before the first
                # epilogue; later segments rewrite a subset.
                if seg == 0:
                    writes = regs.indices()
                else:
                    writes = tuple(rng.sample(regs.indices(), min(1, len(regs))))
                for unit in _body_units(rng, params, writes, False, leaf_indices):
                    for insn in unit:
                        if isinstance(insn, tuple):  # ("bl", key)
                            prog.add(InsnItem(Bl(0), target_key=insn[1]))
                        else:
                            prog.add(InsnItem(insn))
                info["epilogues"].append(prog.add(InsnItem(pop)))
        prog.labels[("fn", i)] = info["first"]
        info["last"] = len(prog.items) - 1
        fn_items.append(info)

    layout = prog.layout()
    functions = []
    for i, (idx, leaf, regs, multi) in enumerate(plans):
        info = fn_items[i]
        start = layout.addresses[info["first"]]
        last_item = prog.items[info["last"]]
        end = layout.addresses[info["last"]] + last_item.size()
        functions.append(
            FunctionRecord(
                name=f"fn_{i:03d}",
                start=start,
                end=end,
                prologue_site=None
                if info["prologue"] is None
                else layout.addresses[info["prologue"]],
                epilogue_sites=[layout.addresses[e] for e in info["epilogues"]],
                true_pop=None if leaf else regs.union(RegisterList.of("pc")),
                used_callee_saved=regs,
                pad_registers=RegisterList(0),
            )
        )

    if len(layout.data) > MAX_IMAGE_SIZE:
        raise ImageError("generated image exceeds configured size")
    image = FirmwareImage(DEFAULT_BASE, layout.data)
    if find_signature_halfwords(image.data):
        # The generator's instruction vocabulary cannot emit the trampoline
        # signature; treat an occurrence as a hard bug rather than retrying.
        raise ImageError("generated image contains a trampoline signature")
    manifest = Manifest(
        base=image.base,
        sram_base=image.sram_base,
        table_base=image.table_base,
        seed=params.seed,
        functions=functions,
    )
    manifest.record_pass(image, "generate", params=params.to_json())
    manifest.validate(image)
    return image, manifest


#: First and third signature halfwords: ldr r0,[pc,#12] and mov pc, r0.
_SIG_LDR = 0x4803
_SIG_MOV = 0x4687


def find_signature_halfwords(data: bytes) -> list[int]:
    """Halfword-aligned offsets where the three-instruction trampoline
    signature occurs (ldr r0,[pc,#12]; adds r0,#imm; mov pc,r0)."""
    out = []
    for off in range(0, len(data) - 5, 2):
        if (
            int.from_bytes(data[off : off + 2], "little") == _SIG_LDR
            and (int.from_bytes(data[off + 2 : off + 4], "little") & 0xFF00) == 0x3000
            and int.from_bytes(data[off + 4 : off + 6], "little") == _SIG_MOV
        ):
            out.append(off)
    return out


def save(image: FirmwareImage, manifest: Manifest, prefix) -> tuple[Path, Path]:
    """Write ``<prefix>.bin`` (raw little-endian image) and ``<prefix>.json``."""
    manifest.validate(image)
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    bin_path = prefix.with_suffix(".bin")
    json_path = prefix.with_suffix(".json")
    bin_path.write_bytes(image.data)
    json_path.write_text(json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n")
    return bin_path, json_path


def load(prefix) -> tuple[FirmwareImage, Manifest]:
    prefix = Path(prefix)
    bin_path = prefix.with_suffix(".bin")
    json_path = prefix.with_suffix(".json")
    try:
        manifest = Manifest.from_json(json.loads(json_path.read_text()))
    except (KeyError, ValueError) as exc:
        raise ImageError(f"malformed manifest {json_path}: {exc}") from exc
    image = FirmwareImage(
        base=manifest.base,
        data=bin_path.read_bytes(),
        sram_base=manifest.sram_base,
        table_base=manifest.table_base,
    )
    manifest.validate(image)
    return image, manifest


def splice(
    image: FirmwareImage, manifest: Manifest, at: int, insert: bytes
) -> tuple[FirmwareImage, Manifest]:
    """Insert ``insert`` at address ``at``, shifting everything after it and
    re-fixing every branch and literal reference that still points inside
    the image."""
    if at % 2 or len(insert) % 2:
        raise ImageError("splice point and payload must be halfword-aligned")
    if not image.base <= at <= image.end:
        raise ImageError(f"splice point 0x{at:x} outside image")
    if not insert:
        return image, manifest
    prog = lift(image, manifest)
    if at == image.end:
        prog.add(BlobItem(insert))
    else:
        insert_idx = prog.index_at(at)
        prog.items.insert(insert_idx, BlobItem(insert))
        prog.labels = {
            key: idx + 1 if idx >= insert_idx else idx
            for key, idx in prog.labels.items()
        }
    layout = prog.layout()
    new_image = FirmwareImage(image.base, layout.data, image.sram_base, image.table_base)
    new_manifest = remap_manifest(manifest, layout.addr_map, prog)
    new_manifest.record_pass(new_image, "splice", at=f"0x{at:x}", length=len(insert))
    new_manifest.validate(new_image)
    return new_image, new_manifest


def remap_manifest(manifest: Manifest, addr_map: dict, prog: Program) -> Manifest:
    """Rebuild the manifest with every address pushed through ``addr_map``
    and the trampoline snapshot refreshed from the program items."""

    def m(addr):
        try:
            return addr_map[addr]
        except KeyError:
            raise RewriteError(f"address 0x{addr:x} lost during rewrite") from None

    functions = [
        FunctionRecord(
            name=fn.name,
            start=m(fn.start),
            end=m(fn.end),
            prologue_site=None if fn.prologue_site is None else m(fn.prologue_site),
            epilogue_sites=[m(s) for s in fn.epilogue_sites],
            true_pop=fn.true_pop,
            used_callee_saved=fn.used_callee_saved,
            pad_registers=fn.pad_registers,
        )
        for fn in manifest.functions
    ]
    new_manifest = Manifest(
        base=manifest.base,
        sram_base=manifest.sram_base,
        table_base=manifest.table_base,
        seed=manifest.seed,
        functions=functions,
        transform_log=[dict(entry) for entry in manifest.transform_log],
    )
    records = [
        item.record for item in prog.items if isinstance(item, TrampolineItem)
    ]
    if records:
        # Refresh the latest snapshot so lift() keeps working on the result.
        new_manifest.transform_log.append(
            {"pass": "relocate_sites", "sites": [rec.to_json() for rec in records]}
        )
    return new_manifest
