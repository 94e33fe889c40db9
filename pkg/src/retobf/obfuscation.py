"""Return-instruction obfuscation and the boot-time table reconstruction.

The transform replaces every return with a three-instruction trampoline that
loads a table address, adds a per-site offset, and jumps into a RAM table
where the decrypted return executes.  The encrypted return halfwords stay in
flash right behind each trampoline, followed by the word holding the table
base for that site, which is exactly what the boot pass (and any attacker)
uses to find them again.

The boot pass is modeled offline: ``build_table`` scans the image like the
in-firmware initialization would and returns the table to install in RAM.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import isa
from ._rewrite import (
    ENC_SLOT_OFFSET,
    LITERAL_SLOT_OFFSET,
    TRAMPOLINE_CORE,
    BlobItem,
    InsnItem,
    TrampolineItem,
    TrampolineRecord,
    lift,
)
from .image import FirmwareImage, Manifest, remap_manifest
from .isa import BranchW, Nop, Pop, Push, RegisterList, encode, is_return
from .machine import TABLE_SIZE

#: Table entry granularity in bytes; plain return entries use one stride.
TABLE_STRIDE = 4

#: Bytes of boot-scan placeholder inserted at the image start.
INIT_STUB_BYTES = 32

#: The adds immediate is one byte; larger offsets move into the literal.
OFFSET_BLOCK = 256


class ObfuscationError(Exception):
    pass


class IntegrityError(ObfuscationError):
    """Decrypted bytes are not a plausible instruction: wrong key or a
    corrupted image."""


class TableCapacityError(ObfuscationError):
    pass


def check_key(key: int) -> int:
    if not 1 <= key <= 0xFFFF:
        raise ObfuscationError(f"key must be a nonzero 16-bit value, got {key:#x}")
    return key


def encrypt_halfword(hw: int, key: int) -> int:
    """XOR cipher over one halfword; an involution, so decryption is the
    same operation."""
    check_key(key)
    return (hw ^ key) & 0xFFFF


def decrypt_halfword(hw: int, key: int) -> int:
    return encrypt_halfword(hw, key)


def encrypt_bytes(data: bytes, key: int) -> bytes:
    if len(data) % 2:
        raise ObfuscationError("ciphertext must cover whole halfwords")
    out = bytearray()
    for i in range(0, len(data), 2):
        hw = int.from_bytes(data[i : i + 2], "little")
        out += encrypt_halfword(hw, key).to_bytes(2, "little")
    return bytes(out)


decrypt_bytes = encrypt_bytes  # XOR involution


class _Allocator:
    """Hands out table offsets at stride granularity."""

    def __init__(self, capacity: int = TABLE_SIZE):
        self.next_offset = 0
        self.capacity = capacity

    def take(self, nbytes: int) -> tuple[int, int]:
        size = -(-nbytes // TABLE_STRIDE) * TABLE_STRIDE
        offset = self.next_offset
        if offset + size > self.capacity:
            raise TableCapacityError(
                f"table needs {offset + size} bytes, capacity {self.capacity}"
            )
        self.next_offset += size
        return offset, size


def _rotation_pop_capacity(regs: RegisterList) -> int:
    """Worst-case byte size of any rotated pop replacement for ``regs``."""
    from .harden import plan_rotation

    worst = 0
    plain = regs.without_flags()
    for position in range(len(plain) + 1):
        plan = plan_rotation(plain, position)
        worst = max(worst, sum(i.byte_length() for i in plan.pop_sequence))
    return worst


def _rotation_push_capacity(regs: RegisterList) -> int:
    from .harden import plan_rotation

    worst = 0
    plain = regs.without_flags()
    for position in range(len(plain) + 1):
        plan = plan_rotation(plain, position)
        worst = max(worst, sum(i.byte_length() for i in plan.push_sequence))
    return worst + 4  # branch back to the function


def _make_record(
    kind: str,
    fn_name: str,
    plain: bytes,
    key: int,
    alloc: _Allocator,
    table_base: int,
    capacity_bytes: int,
) -> TrampolineRecord:
    offset, capacity = alloc.take(capacity_bytes)
    block = offset // OFFSET_BLOCK
    return TrampolineRecord(
        kind=kind,
        fn=fn_name,
        item_start=0,  # assigned at layout
        enc=encrypt_bytes(plain, key),
        adds_imm=offset - block * OFFSET_BLOCK,
        literal_value=table_base + block * OFFSET_BLOCK,
        table_offset=offset,
        capacity=capacity,
    )


def obfuscate_returns(
    image: FirmwareImage,
    manifest: Manifest,
    key: int,
    *,
    rotation_capable: bool = False,
) -> tuple[FirmwareImage, Manifest, list[TrampolineRecord]]:
    """Encrypt every return and plant a trampoline in front of it.

    A boot-scan placeholder is spliced at the image start.  With
    ``rotation_capable`` each site reserves enough table room for any
    rotated replacement sequence, so per-boot draws always fit.
    """
    check_key(key)
    if manifest.has_pass("obfuscate_returns"):
        raise ObfuscationError("image is already return-obfuscated")
    prog = lift(image, manifest)
    alloc = _Allocator()
    if manifest.functions:
        stub = BlobItem(encode(Nop()) * (INIT_STUB_BYTES // 2))
        prog.items.insert(0, stub)
        prog.labels = {key_: idx + 1 for key_, idx in prog.labels.items()}

    for fn in manifest.functions:
        for site in fn.epilogue_sites:
            idx = prog.index_at(site)
            item = prog.items[idx]
            if not isinstance(item, InsnItem) or not is_return(item.insn):
                raise ObfuscationError(f"site 0x{site:x} in {fn.name} is not a return")
            plain = encode(item.insn)
            capacity = len(plain)
            if rotation_capable and isinstance(item.insn, Pop):
                capacity = _rotation_pop_capacity(item.insn.regs)
            record = _make_record(
                "return", fn.name, plain, key, alloc, manifest.table_base, capacity
            )
            prog.items[idx] = TrampolineItem(record, orig_addr=site)

    layout = prog.layout()
    new_image = FirmwareImage(image.base, layout.data, image.sram_base, image.table_base)
    new_manifest = remap_manifest(manifest, layout.addr_map, prog)
    records = [it.record for it in prog.items if isinstance(it, TrampolineItem)]
    new_manifest.transform_log.append(
        {
            "pass": "obfuscate_returns",
            "rotation_capable": rotation_capable,
            "init_stub_bytes": INIT_STUB_BYTES if manifest.functions else 0,
            "leaf_returns_obfuscated": True,
            "sites": [rec.to_json() for rec in records],
            "image_sha256": new_image.sha256(),
        }
    )
    new_manifest.validate(new_image)
    return new_image, new_manifest, records


@dataclass
class RawSighting:
    """A trampoline signature match found by scanning image bytes alone."""

    core: int
    adds_imm: int
    literal_value: int
    enc_window: bytes  # the 8 bytes between the jump and the literal

    @property
    def enc_slot(self) -> int:
        return self.core + ENC_SLOT_OFFSET

    @property
    def literal_slot(self) -> int:
        return self.core + LITERAL_SLOT_OFFSET

    @property
    def resume(self) -> int:
        return self.core + TRAMPOLINE_CORE

    @property
    def entry_address(self) -> int:
        return self.literal_value + self.adds_imm


_SIG_LDR = 0x4803  # ldr r0, [pc, #12]
_SIG_MOV = 0x4687  # mov pc, r0


def scan_trampolines(data: bytes, base: int) -> list[RawSighting]:
    """Find every halfword-aligned trampoline signature.

    This is the same walk the boot-time initialization performs, which is
    precisely why the obfuscation cannot hide return locations: anything the
    boot pass can find, an attacker can find.
    """
    sightings = []
    for off in range(0, len(data) - 1, 2):
        if int.from_bytes(data[off : off + 2], "little") != _SIG_LDR:
            continue
        if off + 6 > len(data):
            continue
        adds = int.from_bytes(data[off + 2 : off + 4], "little")
        if adds & 0xFF00 != 0x3000:
            continue
        if int.from_bytes(data[off + 4 : off + 6], "little") != _SIG_MOV:
            continue
        addr = base + off
        literal_addr = ((addr + 4) & ~3) + 12
        lit_off = literal_addr - base
        if lit_off + 4 > len(data):
            continue
        sightings.append(
            RawSighting(
                core=addr,
                adds_imm=adds & 0xFF,
                literal_value=int.from_bytes(data[lit_off : lit_off + 4], "little"),
                enc_window=bytes(data[off + 6 : lit_off]),
            )
        )
    return sightings


@dataclass
class TableEntry:
    offset: int
    data: bytes
    text: str


@dataclass
class RamTable:
    """The rebuilt instruction table that lives at the bottom of RAM."""

    base: int
    stride: int = TABLE_STRIDE
    entries: list[TableEntry] = field(default_factory=list)
    draws: list[dict] = field(default_factory=list)

    def add(self, offset: int, data: bytes, text: str, capacity: int | None = None):
        if self.entries:
            prev = self.entries[-1]
            if offset < prev.offset + len(prev.data):
                raise ObfuscationError("table entries overlap")
        if offset % self.stride:
            raise ObfuscationError("table offset not stride-aligned")
        if capacity is not None and len(data) > capacity:
            raise TableCapacityError(
                f"entry at +{offset} needs {len(data)} bytes, reserved {capacity}"
            )
        self.entries.append(TableEntry(offset, data, text))

    @property
    def size(self) -> int:
        if not self.entries:
            return 0
        last = self.entries[-1]
        return last.offset + len(last.data)

    def install(self, state) -> None:
        for entry in self.entries:
            lo = self.base - state.sram_base + entry.offset
            state.sram[lo : lo + len(entry.data)] = entry.data

    def to_json(self) -> dict:
        return {
            "base": f"0x{self.base:x}",
            "stride": self.stride,
            "entries": [
                {"offset": e.offset, "data": e.data.hex(), "text": e.text}
                for e in self.entries
            ],
            "draws": self.draws,
        }


def _classify_halfword(hw: int) -> str | None:
    """Is this decrypted halfword a plausible table payload on its own?"""
    if (hw & 0xFF00) == 0xBD00:
        return "pop-pc"
    if hw == 0x4770:
        return "bx-lr"
    if (hw & 0xFF00) == 0xB500:
        return "push-lr"
    if hw in (0xE8BD, 0xE92D):
        return "wide-prefix"
    return None


def _decode_sealed(window: bytes, key: int, sighting: RawSighting):
    """Decrypt the sealed slot of one site and decode the hidden instruction.

    Raises IntegrityError unless the plaintext is a return or a prologue
    push, the only things the transform ever seals.
    """
    hw = decrypt_halfword(int.from_bytes(window[0:2], "little"), key)
    kind = _classify_halfword(hw)
    if kind in ("pop-pc", "bx-lr", "push-lr"):
        plain = hw.to_bytes(2, "little")
        insn, _ = isa.decode(plain)
        return insn, plain
    if kind == "wide-prefix" and len(window) >= 4:
        hw2 = decrypt_halfword(int.from_bytes(window[2:4], "little"), key)
        plain = hw.to_bytes(2, "little") + hw2.to_bytes(2, "little")
        insn, length = isa.decode(plain)
        ok = (isinstance(insn, Pop) and insn.regs.has_pc) or (
            isinstance(insn, Push) and insn.regs.has_lr
        )
        if length == 4 and ok:
            return insn, plain
    raise IntegrityError(
        f"site 0x{sighting.core:x}: decrypted word 0x{hw:04x} is not a return "
        "or prologue push (wrong key or corrupted image)"
    )


def entry_bytes_for(insn, plain: bytes, sighting: RawSighting, entry_addr: int) -> tuple[bytes, str]:
    """Table entry payload for a decrypted instruction: a return executes in
    place; a push gains a branch back to the function."""
    if is_return(insn):
        return plain, insn.text()
    back = BranchW(sighting.resume)
    data = plain + encode(back, address=entry_addr + len(plain))
    return data, f"{insn.text()}; {back.text()}"


def build_table(image: FirmwareImage, key: int) -> RamTable:
    """Reconstruct the RAM table exactly as the boot pass would: scan the
    image for trampolines, decrypt each sealed slot, and place the plaintext
    at its site's table offset."""
    check_key(key)
    table = RamTable(base=image.table_base)
    sightings = sorted(scan_trampolines(image.data, image.base), key=lambda s: s.entry_address)
    for sighting in sightings:
        insn, plain = _decode_sealed(sighting.enc_window, key, sighting)
        offset = sighting.entry_address - image.table_base
        if offset < 0 or offset >= TABLE_SIZE:
            raise IntegrityError(f"site 0x{sighting.core:x}: entry outside table")
        data, text = entry_bytes_for(insn, plain, sighting, sighting.entry_address)
        table.add(offset, data, text)
    if table.size > TABLE_SIZE:
        raise TableCapacityError(f"table size {table.size} exceeds {TABLE_SIZE}")
    return table


#: Raw patterns a plaintext sweep hunts for.  The sweep checks architectural
#: bit patterns, not canonical encodings, so nothing slips through.
def _halfword_is_return(hw: int) -> bool:
    return (hw & 0xFF00) == 0xBD00 or hw == 0x4770


def _halfword_is_push_lr(hw: int) -> bool:
    return (hw & 0xFF00) == 0xB500


def sweep_plaintext(
    data: bytes,
    *,
    exclude: list[tuple[int, int]] = (),
    want: str = "returns",
) -> list[int]:
    """Halfword-aligned offsets of plaintext returns (or prologue pushes).

    ``exclude`` masks byte ranges (trampoline data slots hold ciphertext and
    literals, which are not code).  Wide encodings are matched as raw
    patterns at any halfword boundary.
    """

    def masked(off: int) -> bool:
        return any(lo <= off < hi for lo, hi in exclude)

    hits = []
    for off in range(0, len(data) - 1, 2):
        if masked(off):
            continue
        hw = int.from_bytes(data[off : off + 2], "little")
        if want == "returns":
            if _halfword_is_return(hw):
                hits.append(off)
                continue
            if hw == 0xE8BD and off + 4 <= len(data) and not masked(off + 2):
                hw2 = int.from_bytes(data[off + 2 : off + 4], "little")
                if hw2 & 0x8000 and not hw2 & 0x4000:
                    hits.append(off)
        else:
            if _halfword_is_push_lr(hw):
                hits.append(off)
                continue
            if hw == 0xE92D and off + 4 <= len(data) and not masked(off + 2):
                hw2 = int.from_bytes(data[off + 2 : off + 4], "little")
                if hw2 & 0x4000:
                    hits.append(off)
    return hits


def trampoline_data_ranges(image: FirmwareImage) -> list[tuple[int, int]]:
    """Byte ranges (offsets) of the non-code slots inside found trampolines:
    the sealed instruction plus padding plus the literal word."""
    out = []
    for s in scan_trampolines(image.data, image.base):
        out.append((s.enc_slot - image.base, s.literal_slot + 4 - image.base))
    return out
