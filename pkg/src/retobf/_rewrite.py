"""Lift/layout machinery for image rewriting.

Transforms never patch bytes in place: the image is lifted to a list of
items (instructions, opaque blobs, trampolines), edited at the item level,
and laid out again.  Layout reassigns addresses, re-encodes pc-relative
branches against the moved targets, and keeps every trampoline's literal
word reachable by its fixed pc-relative load.

Trampoline shape (the core starts at an address ≡ 2 mod 4 so that the
``ldr r0, [pc, #12]`` reaches the literal):

    core+0   ldr  r0, [pc, #12]
    core+2   adds r0, #imm
    core+4   mov  pc, r0
    core+6   encrypted instruction (2 or 4 bytes)
    ...      nop padding
    core+14  table-base literal word
    core+18  end of core

One leading or trailing nop pads the item to a constant 20-byte footprint,
so relocating a trampoline never changes its size.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import isa
from .isa import AddsImmR0, Bl, BranchW, LdrLitR0, MovPcR0, Nop, decode, encode

TRAMPOLINE_CORE = 18
TRAMPOLINE_FOOTPRINT = 20
LDR_LITERAL_IMM = 12
ENC_SLOT_OFFSET = 6
LITERAL_SLOT_OFFSET = 14

_NOP = encode(Nop())


class RewriteError(Exception):
    """Lift or layout failed (unmapped branch target, bad boundary, ...)."""


def core_address(item_start: int) -> int:
    """Core start for a trampoline item laid out at ``item_start``."""
    return item_start if item_start % 4 == 2 else item_start + 2


@dataclass
class TrampolineRecord:
    """One planted trampoline; serialized into the manifest transform log."""

    kind: str  # "return" or "push"
    fn: str
    item_start: int
    enc: bytes
    adds_imm: int
    literal_value: int
    table_offset: int
    capacity: int

    @property
    def core(self) -> int:
        return core_address(self.item_start)

    @property
    def enc_slot(self) -> int:
        return self.core + ENC_SLOT_OFFSET

    @property
    def literal_slot(self) -> int:
        return self.core + LITERAL_SLOT_OFFSET

    @property
    def resume(self) -> int:
        """Address execution continues at after the table entry runs."""
        return self.core + TRAMPOLINE_CORE

    @property
    def entry_address(self) -> int:
        return self.literal_value + self.adds_imm

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "fn": self.fn,
            "item_start": f"0x{self.item_start:x}",
            "enc": self.enc.hex(),
            "adds_imm": self.adds_imm,
            "literal_value": f"0x{self.literal_value:x}",
            "table_offset": self.table_offset,
            "capacity": self.capacity,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrampolineRecord":
        return cls(
            kind=obj["kind"],
            fn=obj["fn"],
            item_start=int(obj["item_start"], 16),
            enc=bytes.fromhex(obj["enc"]),
            adds_imm=int(obj["adds_imm"]),
            literal_value=int(obj["literal_value"], 16),
            table_offset=int(obj["table_offset"]),
            capacity=int(obj["capacity"]),
        )


class Item:
    orig_addr: int | None = None

    def size(self) -> int:
        raise NotImplementedError

    def emit(self, addr: int, resolve) -> bytes:
        raise NotImplementedError


class InsnItem(Item):
    __slots__ = ("insn", "target_key", "orig_addr")

    def __init__(self, insn, target_key=None, orig_addr=None):
        self.insn = insn
        self.target_key = target_key
        self.orig_addr = orig_addr

    def size(self) -> int:
        return self.insn.byte_length()

    def emit(self, addr: int, resolve) -> bytes:
        insn = self.insn
        if self.target_key is not None:
            target = resolve(self.target_key)
            if isinstance(insn, Bl):
                insn = Bl(target)
            elif isinstance(insn, BranchW):
                insn = BranchW(target)
        return encode(insn, address=addr)


class BlobItem(Item):
    __slots__ = ("data", "orig_addr")

    def __init__(self, data: bytes, orig_addr=None):
        if len(data) % 2:
            raise RewriteError("blob length must be even")
        self.data = bytes(data)
        self.orig_addr = orig_addr

    def size(self) -> int:
        return len(self.data)

    def emit(self, addr: int, resolve) -> bytes:
        return self.data


class TrampolineItem(Item):
    __slots__ = ("record", "orig_addr")

    def __init__(self, record: TrampolineRecord, orig_addr=None):
        self.record = record
        self.orig_addr = orig_addr

    def size(self) -> int:
        return TRAMPOLINE_FOOTPRINT

    def emit(self, addr: int, resolve) -> bytes:
        rec = self.record
        rec.item_start = addr
        pad = b"" if addr % 4 == 2 else _NOP
        core = bytearray()
        core += encode(LdrLitR0(LDR_LITERAL_IMM))
        core += encode(AddsImmR0(rec.adds_imm))
        core += encode(MovPcR0())
        core += rec.enc
        while len(core) < LITERAL_SLOT_OFFSET:
            core += _NOP
        core += rec.literal_value.to_bytes(4, "little")
        out = pad + bytes(core)
        out += _NOP * ((TRAMPOLINE_FOOTPRINT - len(out)) // 2)
        if len(out) != TRAMPOLINE_FOOTPRINT or core_address(addr) % 4 != 2:
            raise RewriteError(f"bad trampoline layout at 0x{addr:x}")
        return out


@dataclass
class Layout:
    data: bytes
    addresses: list[int]
    addr_map: dict  # original address (or label key) -> new address


class Program:
    """An ordered item list with symbolic branch targets."""

    def __init__(self, base: int):
        self.base = base
        self.items: list[Item] = []
        self.labels: dict = {}
        self.orig_end: int | None = None

    def add(self, item: Item, label=None) -> int:
        idx = len(self.items)
        self.items.append(item)
        if label is not None:
            self.labels[label] = idx
        if item.orig_addr is not None:
            self.labels.setdefault(item.orig_addr, idx)
        return idx

    def index_at(self, orig_addr: int) -> int:
        idx = self.labels.get(orig_addr)
        if idx is None:
            raise RewriteError(f"0x{orig_addr:x} is not an item boundary")
        return idx

    def layout(self) -> Layout:
        addresses = []
        addr = self.base
        for item in self.items:
            addresses.append(addr)
            addr += item.size()
        end = addr

        def resolve(key):
            idx = self.labels.get(key)
            if idx is None:
                raise RewriteError(f"unresolved branch target {key!r}")
            return addresses[idx]

        chunks = []
        for item, item_addr in zip(self.items, addresses):
            data = item.emit(item_addr, resolve)
            if len(data) != item.size():
                raise RewriteError("item emitted a different size than declared")
            chunks.append(data)

        addr_map = {}
        for item, item_addr in zip(self.items, addresses):
            if item.orig_addr is not None:
                addr_map[item.orig_addr] = item_addr
        for key, idx in self.labels.items():
            addr_map.setdefault(key, addresses[idx])
        if self.orig_end is not None:
            addr_map.setdefault(self.orig_end, end)
        addr_map["end"] = end
        return Layout(b"".join(chunks), addresses, addr_map)


def lift(image, manifest) -> Program:
    """Decode an image back into a Program, guided by the manifest.

    Function ranges are decoded instruction by instruction, planted
    trampolines are reconstructed from the latest transform-log snapshot,
    and everything else is preserved as opaque blobs.
    """
    records = {rec.item_start: rec for rec in manifest.trampoline_records()}
    fn_bounds = [(fn.start, fn.end) for fn in manifest.functions]
    prog = Program(image.base)
    end = image.base + len(image.data)
    prog.orig_end = end
    boundaries = sorted(
        {image.base, end}
        | {s for s, _ in fn_bounds}
        | {e for _, e in fn_bounds}
        | set(records)
    )

    def in_function(addr: int) -> bool:
        return any(s <= addr < e for s, e in fn_bounds)

    addr = image.base
    while addr < end:
        if addr in records:
            rec = records[addr]
            prog.add(TrampolineItem(rec, orig_addr=addr))
            addr += TRAMPOLINE_FOOTPRINT
            continue
        if not in_function(addr):
            stop = min(b for b in boundaries if b > addr)
            next_rec = min((a for a in records if a > addr), default=end)
            stop = min(stop, next_rec)
            prog.add(BlobItem(image.data[addr - image.base : stop - image.base], orig_addr=addr))
            addr = stop
            continue
        insn, length = decode(image.data, addr - image.base, addr)
        if isinstance(insn, isa.Unknown):
            raise RewriteError(f"cannot lift unknown halfword at 0x{addr:x}")
        target_key = insn.target if isinstance(insn, (Bl, BranchW)) else None
        prog.add(InsnItem(insn, target_key=target_key, orig_addr=addr))
        addr += length
    return prog
