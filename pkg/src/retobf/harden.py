"""Hardening passes layered on top of the return obfuscation.

Three independent measures:

* ``encrypt_pushes`` extends the sealing to prologue pushes, hiding the
  register lists that make epilogues derivable from prologue symmetry.
* ``pad_registers`` adds randomly drawn unused callee-saved registers to
  each push/pop pair; a body never touches them, so no amount of static
  analysis recovers them.
* ``build_rotated_table`` replaces each decrypted pair in the table with a
  split sequence that moves the return address to a random stack slot,
  redrawn from the boot seed on every reset.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from . import isa
from ._rewrite import InsnItem, TrampolineItem, TrampolineRecord, lift
from .image import FirmwareImage, FunctionRecord, Manifest, remap_manifest
from .isa import BranchW, BxLr, Pop, Push, RegisterList, encode
from .machine import TABLE_SIZE
from .obfuscation import (
    ObfuscationError,
    RamTable,
    _Allocator,
    _decode_sealed,
    _make_record,
    check_key,
    entry_bytes_for,
    scan_trampolines,
)


class HardenError(ObfuscationError):
    pass


@dataclass
class RotationPlan:
    """One return-address placement and the instruction pair realizing it.

    ``position`` is the stack slot (0 = lowest address) the return address
    occupies; position == len(regs) reproduces the plain push/pop pair.
    """

    regs: RegisterList
    position: int
    pop_sequence: list
    push_sequence: list

    @property
    def layout(self) -> list[str]:
        """Stack contents from the lowest address upward."""
        names = list(self.regs.names())
        split = len(names) - self.position
        return names[split:] + ["ret"] + names[:split]

    @property
    def stack_words(self) -> int:
        return len(self.regs) + 1


def plan_rotation(regs: RegisterList, position: int) -> RotationPlan:
    """Build the split pop/push sequences placing the return address at
    ``position``.

    The family is the cyclic rotations of the plain layout: a contiguous
    split keeps every emitted register list ascending, hence encodable.
    """
    regs = regs.without_flags()
    n = len(regs)
    if not 0 <= position <= n:
        raise HardenError(f"position {position} out of range for {n} registers")
    lr = RegisterList.of("lr")
    pc = RegisterList.of("pc")
    if position == n:
        return RotationPlan(regs, position, [Pop(regs.union(pc))], [Push(regs.union(lr))])
    names = regs.indices()
    split = n - position
    head = RegisterList.of(*names[:split])
    tail = RegisterList.of(*names[split:])
    pop_seq: list = [Pop(tail.union(lr))]
    if not head.is_empty:
        pop_seq.append(Pop(head))
    pop_seq.append(BxLr())
    push_seq = []
    if not head.is_empty:
        push_seq.append(Push(head))
    push_seq.append(Push(tail.union(lr)))
    return RotationPlan(regs, position, pop_seq, push_seq)


@dataclass
class PadPlan:
    fn: str
    k_drawn: int
    extra: RegisterList

    def to_json(self) -> dict:
        return {"fn": self.fn, "k_drawn": self.k_drawn, "extra": list(self.extra.names())}


def pad_registers(fn: FunctionRecord, rng: random.Random, kmax: int) -> PadPlan:
    """Draw 0..kmax additional unused callee-saved registers for one
    function's push/pop pair (truncated to what is available)."""
    if fn.is_leaf:
        return PadPlan(fn.name, 0, RegisterList(0))
    taken = fn.used_callee_saved.union(fn.pad_registers)
    available = [r for r in isa.CALLEE_SAVED if r not in taken]
    k = rng.randint(0, kmax) if kmax > 0 else 0
    k = min(k, len(available))
    extra = RegisterList.of(*rng.sample(available, k)) if k else RegisterList(0)
    return PadPlan(fn.name, k, extra)


def pad_corpus(
    image: FirmwareImage, manifest: Manifest, key_seed: int, kmax: int
) -> tuple[FirmwareImage, Manifest, list[PadPlan]]:
    """Apply register padding to every push/pop pair in a plain image."""
    if manifest.has_pass("obfuscate_returns"):
        raise HardenError("padding must run before return obfuscation")
    rng = random.Random(key_seed)
    plans = [pad_registers(fn, rng, kmax) for fn in manifest.functions]
    prog = lift(image, manifest)
    for fn, plan in zip(manifest.functions, plans):
        if plan.extra.is_empty:
            continue
        new_list = fn.used_callee_saved.union(fn.pad_registers).union(plan.extra)
        push_idx = prog.index_at(fn.prologue_site)
        prog.items[push_idx] = InsnItem(
            Push(new_list.union(RegisterList.of("lr"))), orig_addr=fn.prologue_site
        )
        for site in fn.epilogue_sites:
            idx = prog.index_at(site)
            prog.items[idx] = InsnItem(
                Pop(new_list.union(RegisterList.of("pc"))), orig_addr=site
            )
    layout = prog.layout()
    new_image = FirmwareImage(image.base, layout.data, image.sram_base, image.table_base)
    new_manifest = remap_manifest(manifest, layout.addr_map, prog)
    for fn, plan in zip(new_manifest.functions, plans):
        if not plan.extra.is_empty:
            fn.pad_registers = fn.pad_registers.union(plan.extra)
            fn.true_pop = fn.true_pop.union(plan.extra)
    new_manifest.transform_log.append(
        {
            "pass": "pad_registers",
            "kmax": kmax,
            "seed": key_seed,
            "draws": [plan.to_json() for plan in plans],
            "image_sha256": new_image.sha256(),
        }
    )
    new_manifest.validate(new_image)
    return new_image, new_manifest, plans


def encrypt_pushes(
    image: FirmwareImage, manifest: Manifest, key: int
) -> tuple[FirmwareImage, Manifest, list[TrampolineRecord]]:
    """Replace every prologue push with a trampoline whose table entry runs
    the decrypted push and branches back into the function."""
    check_key(key)
    if manifest.has_pass("encrypt_pushes"):
        raise HardenError("pushes are already encrypted")
    rotation_capable = any(
        entry.get("rotation_capable")
        for entry in manifest.transform_log
        if entry.get("pass") == "obfuscate_returns"
    )
    prog = lift(image, manifest)
    existing = [it.record for it in prog.items if isinstance(it, TrampolineItem)]
    alloc = _Allocator()
    if existing:
        alloc.next_offset = max(r.table_offset + r.capacity for r in existing)
    from .obfuscation import _rotation_push_capacity

    for fn in manifest.functions:
        if fn.prologue_site is None:
            continue
        idx = prog.index_at(fn.prologue_site)
        item = prog.items[idx]
        if not isinstance(item, InsnItem) or not isinstance(item.insn, Push):
            raise HardenError(f"prologue of {fn.name} is not a plaintext push")
        plain = encode(item.insn)
        capacity = len(plain) + 4
        if rotation_capable:
            capacity = _rotation_push_capacity(item.insn.regs)
        record = _make_record(
            "push", fn.name, plain, key, alloc, manifest.table_base, capacity
        )
        prog.items[idx] = TrampolineItem(record, orig_addr=fn.prologue_site)

    layout = prog.layout()
    new_image = FirmwareImage(image.base, layout.data, image.sram_base, image.table_base)
    new_manifest = remap_manifest(manifest, layout.addr_map, prog)
    records = [it.record for it in prog.items if isinstance(it, TrampolineItem)]
    new_manifest.transform_log.append(
        {
            "pass": "encrypt_pushes",
            "rotation_capable": rotation_capable,
            "sites": [rec.to_json() for rec in records],
            "image_sha256": new_image.sha256(),
        }
    )
    new_manifest.validate(new_image)
    return new_image, new_manifest, records


def harden(
    image: FirmwareImage,
    manifest: Manifest,
    key: int,
    *,
    kmax: int = 3,
    rotate: bool = False,
    encrypt_push: bool = False,
    seed: int = 0,
):
    """Full hardening pipeline over a plain corpus: pad, obfuscate returns,
    and optionally seal pushes.  Rotation requires sealed pushes (a fixed
    plaintext push cannot match a per-boot layout), so ``rotate`` implies
    ``encrypt_push``."""
    from .obfuscation import obfuscate_returns

    if rotate:
        encrypt_push = True
    image, manifest, pad_plans = pad_corpus(image, manifest, seed, kmax)
    image, manifest, _ = obfuscate_returns(image, manifest, key, rotation_capable=rotate)
    if encrypt_push:
        image, manifest, _ = encrypt_pushes(image, manifest, key)
    return image, manifest, pad_plans


def _paired_sites(image: FirmwareImage, manifest: Manifest, key: int):
    """Group the image's trampolines per function, with decrypted payloads.

    Returns a list of (fn_name, push_sighting | None, [return sightings],
    regs | None) in address order.  Raises unless sightings and manifest
    records line up."""
    records = manifest.trampoline_records()
    if not records:
        raise HardenError("image has no trampoline records")
    by_core = {s.core: s for s in scan_trampolines(image.data, image.base)}
    grouped: dict[str, dict] = {}
    for fn in manifest.functions:
        grouped[fn.name] = {"push": None, "returns": [], "fn": fn}
    for rec in records:
        sighting = by_core.get(rec.core)
        if sighting is None:
            raise HardenError(f"recorded trampoline at 0x{rec.core:x} not found in image")
        entry = grouped[rec.fn]
        if rec.kind == "push":
            entry["push"] = (rec, sighting)
        else:
            entry["returns"].append((rec, sighting))
    return [grouped[fn.name] for fn in manifest.functions]


def _draw_positions(groups, seed: int, key: int) -> list[dict]:
    """Per-function rotation draws for one boot.  The draw order is the
    function order, making the sequence reproducible for any seed."""
    rng = random.Random(seed)
    draws = []
    for group in groups:
        fn = group["fn"]
        if group["push"] is None:
            draws.append({"fn": fn.name, "slots": 0, "position": 0})
            continue
        rec, sighting = group["push"]
        insn, _ = _decode_sealed(sighting.enc_window, key, sighting)
        regs = insn.regs.without_flags()
        position = rng.randint(0, len(regs))
        draws.append(
            {"fn": fn.name, "slots": len(regs) + 1, "position": position, "regs": regs}
        )
    return draws


def build_rotated_table(
    image: FirmwareImage, manifest: Manifest, key: int, seed: int
) -> RamTable:
    """Build one boot's table with per-function rotated pair sequences.

    Requires an image hardened with rotation-capable sites (returns and
    pushes both sealed and cross-referenced in the transform log)."""
    check_key(key)
    if not manifest.has_pass("encrypt_pushes"):
        raise HardenError("rotation needs sealed pushes; run encrypt_pushes first")
    groups = _paired_sites(image, manifest, key)
    draws = _draw_positions(groups, seed, key)
    table = RamTable(base=image.table_base)
    table.draws = [
        {k: (list(v.names()) if isinstance(v, RegisterList) else v) for k, v in d.items()}
        for d in draws
    ]
    items: list[tuple[int, bytes, str, int]] = []
    for group, draw in zip(groups, draws):
        fn = group["fn"]
        if group["push"] is None:
            for rec, sighting in group["returns"]:
                insn, plain = _decode_sealed(sighting.enc_window, key, sighting)
                data, text = entry_bytes_for(insn, plain, sighting, sighting.entry_address)
                items.append((rec.table_offset, data, text, rec.capacity))
            continue
        plan = plan_rotation(draw["regs"], draw["position"])
        for rec, sighting in group["returns"]:
            data = b"".join(
                encode(i, address=sighting.entry_address + off)
                for i, off in _with_offsets(plan.pop_sequence)
            )
            text = "; ".join(i.text() for i in plan.pop_sequence)
            items.append((rec.table_offset, data, text, rec.capacity))
        rec, sighting = group["push"]
        seq = list(plan.push_sequence)
        body = b""
        for insn, off in _with_offsets(seq):
            body += encode(insn, address=sighting.entry_address + off)
        back = BranchW(sighting.resume)
        body += encode(back, address=sighting.entry_address + len(body))
        text = "; ".join(i.text() for i in seq) + f"; {back.text()}"
        items.append((rec.table_offset, body, text, rec.capacity))
    for offset, data, text, capacity in sorted(items):
        table.add(offset, data, text, capacity=capacity)
    if table.size > TABLE_SIZE:
        raise HardenError(f"table size {table.size} exceeds {TABLE_SIZE}")
    return table


def _with_offsets(seq):
    off = 0
    for insn in seq:
        yield insn, off
        off += insn.byte_length()


def position_distribution(
    image: FirmwareImage, manifest: Manifest, key: int, seeds
) -> dict[str, dict]:
    """Histogram of drawn return-address positions per function across boot
    seeds, with a flag for functions whose slot is necessarily fixed."""
    seeds = list(seeds)
    if not seeds:
        raise HardenError("at least one seed required")
    groups = _paired_sites(image, manifest, key)
    hist: dict[str, dict] = {}
    for group in groups:
        fn = group["fn"]
        slots = 0
        if group["push"] is not None:
            rec, sighting = group["push"]
            insn, _ = _decode_sealed(sighting.enc_window, key, sighting)
            slots = len(insn.regs.without_flags()) + 1
        hist[fn.name] = {
            "slots": slots,
            "counts": [0] * max(slots, 1),
            "degenerate": slots <= 1 or len(seeds) == 1,
        }
    for seed in seeds:
        for draw in _draw_positions(groups, seed, key):
            if draw["slots"]:
                hist[draw["fn"]]["counts"][draw["position"]] += 1
    return hist
