"""Deterministic interpreter for the Thumb subset.

Serves as the semantic oracle: it proves transforms behavior-preserving and
demonstrates where return addresses land on the stack.  Condition flags are
not modeled (nothing in the subset branches on them), and there is no cycle
accuracy; a step budget bounds every run.

Memory model: a read-only flash region holding the firmware image and a
read-write scratch RAM region holding the rebuilt instruction table at its
bottom and the stack at its top.  Execution is allowed from flash and from
the table region only.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from . import isa
from .isa import Instruction, decode

#: Scratch RAM region size and internal split (table at bottom, stack at top).
SRAM_SIZE = 0x10000
TABLE_SIZE = 0x4000
STACK_RESERVE = 0x4000

#: Address used as the "caller" a harnessed call returns to.
DEFAULT_SENTINEL = 0x000E0000

DEFAULT_STEP_BUDGET = 100_000

#: Bytes of pre-seeded caller stack left above the initial sp.
CALLER_STACK_BYTES = 64

MASK32 = 0xFFFFFFFF


class FaultKind(enum.Enum):
    UNDECODABLE = "undecodable instruction"
    BAD_PC = "pc outside executable regions or misaligned"
    MEMORY = "access outside mapped regions or read-only write"
    STACK = "sp left the stack region or misaligned"
    INTERWORK = "branch to a non-thumb address"
    INVALID = "architecturally invalid instruction"
    BUDGET = "step budget exceeded"


class MachineFault(Exception):
    def __init__(self, kind: FaultKind, detail: str = ""):
        self.kind = kind
        super().__init__(f"{kind.value}{': ' + detail if detail else ''}")


@dataclass
class TraceEvent:
    index: int
    pc: int
    insn: Instruction
    sp_before: int
    sp_after: int
    access: tuple[str, int, int] | None = None  # (kind, address, value)

    def line(self) -> str:
        return f"step pc=0x{self.pc:08x} sp=0x{self.sp_before:08x} {self.insn.text()}"


@dataclass
class MachineState:
    """One core's architectural state plus its two memory regions."""

    regs: list[int]
    flash_base: int
    flash: bytes
    sram_base: int
    sram: bytearray
    table_base: int
    table_size: int = TABLE_SIZE
    stack_limit: int = 0
    stack_top: int = 0
    step_count: int = 0

    @property
    def pc(self) -> int:
        return self.regs[isa.PC]

    @pc.setter
    def pc(self, value: int) -> None:
        self.regs[isa.PC] = value & MASK32

    @property
    def sp(self) -> int:
        return self.regs[isa.SP]

    @sp.setter
    def sp(self, value: int) -> None:
        self.regs[isa.SP] = value & MASK32

    @property
    def lr(self) -> int:
        return self.regs[isa.LR]

    @lr.setter
    def lr(self, value: int) -> None:
        self.regs[isa.LR] = value & MASK32

    def in_flash(self, addr: int, size: int = 1) -> bool:
        return self.flash_base <= addr and addr + size <= self.flash_base + len(self.flash)

    def in_sram(self, addr: int, size: int = 1) -> bool:
        return self.sram_base <= addr and addr + size <= self.sram_base + len(self.sram)

    def read(self, addr: int, size: int) -> int:
        if self.in_flash(addr, size):
            raw = self.flash[addr - self.flash_base : addr - self.flash_base + size]
        elif self.in_sram(addr, size):
            raw = self.sram[addr - self.sram_base : addr - self.sram_base + size]
        else:
            raise MachineFault(FaultKind.MEMORY, f"read of {size} at 0x{addr:08x}")
        return int.from_bytes(raw, "little")

    def write(self, addr: int, size: int, value: int) -> None:
        if self.in_flash(addr, size):
            raise MachineFault(FaultKind.MEMORY, f"write to flash at 0x{addr:08x}")
        if not self.in_sram(addr, size):
            raise MachineFault(FaultKind.MEMORY, f"write of {size} at 0x{addr:08x}")
        self.sram[addr - self.sram_base : addr - self.sram_base + size] = value.to_bytes(
            size, "little"
        )


def make_state(
    image,
    table=None,
    *,
    regs: dict[int, int] | None = None,
    sram_size: int = SRAM_SIZE,
    table_size: int = TABLE_SIZE,
) -> MachineState:
    """Build a fresh state for ``image`` with ``table`` installed in RAM.

    ``image`` needs ``base``, ``data`` and ``sram_base``/``table_base``
    attributes; ``table`` is installed via its ``install`` hook when given.
    """
    sram = bytearray(sram_size)
    state = MachineState(
        regs=[0] * 16,
        flash_base=image.base,
        flash=bytes(image.data),
        sram_base=image.sram_base,
        sram=sram,
        table_base=image.table_base,
        table_size=table_size,
    )
    state.stack_limit = image.table_base + table_size
    state.stack_top = image.sram_base + sram_size
    if table is not None:
        table.install(state)
    if regs:
        for idx, value in regs.items():
            state.regs[idx] = value & MASK32
    return state


def _fetch(state: MachineState) -> tuple[Instruction, int]:
    pc = state.pc
    if pc % 2:
        raise MachineFault(FaultKind.BAD_PC, f"misaligned pc 0x{pc:08x}")
    in_table = state.table_base <= pc < state.table_base + state.table_size
    if state.in_flash(pc, 2):
        data, off = state.flash, pc - state.flash_base
    elif in_table and state.in_sram(pc, 2):
        data, off = bytes(state.sram), pc - state.sram_base
    else:
        raise MachineFault(FaultKind.BAD_PC, f"pc 0x{pc:08x} not executable")
    try:
        return decode(data, off, pc)
    except isa.TruncatedStreamError as exc:
        raise MachineFault(FaultKind.UNDECODABLE, str(exc)) from exc


def _check_sp(state: MachineState) -> None:
    if state.sp % 4:
        raise MachineFault(FaultKind.STACK, f"sp misaligned 0x{state.sp:08x}")
    if not state.stack_limit <= state.sp <= state.stack_top:
        raise MachineFault(FaultKind.STACK, f"sp 0x{state.sp:08x} outside stack region")


def _branch_interwork(state: MachineState, value: int) -> None:
    if not value & 1:
        raise MachineFault(FaultKind.INTERWORK, f"target 0x{value:08x} lacks thumb bit")
    state.pc = value & ~1


def step(state: MachineState) -> TraceEvent:
    """Execute one instruction, mutating ``state``; returns the trace event."""
    insn, length = _fetch(state)
    pc = state.pc
    sp_before = state.sp
    access = None
    next_pc = pc + length

    if isinstance(insn, isa.Push):
        if insn.regs.is_empty or insn.regs.has_pc:
            raise MachineFault(FaultKind.INVALID, f"push {insn.regs}")
        count = len(insn.regs)
        state.sp = state.sp - 4 * count
        _check_sp(state)
        for i, reg in enumerate(insn.regs):
            state.write(state.sp + 4 * i, 4, state.regs[reg])
    elif isinstance(insn, isa.Pop):
        if insn.regs.is_empty:
            raise MachineFault(FaultKind.INVALID, "pop {}")
        values = [state.read(state.sp + 4 * i, 4) for i in range(len(insn.regs))]
        state.sp = state.sp + 4 * len(insn.regs)
        _check_sp(state)
        for reg, value in zip(insn.regs, values):
            if reg == isa.PC:
                _branch_interwork(state, value)
            else:
                state.regs[reg] = value
        if insn.regs.has_pc:
            next_pc = state.pc
    elif isinstance(insn, isa.BxLr):
        _branch_interwork(state, state.lr)
        next_pc = state.pc
    elif isinstance(insn, isa.LdrLitR0):
        addr = ((pc + 4) & ~3) + insn.offset
        state.regs[0] = state.read(addr, 4)
        access = ("load", addr, state.regs[0])
    elif isinstance(insn, isa.AddsImmR0):
        state.regs[0] = (state.regs[0] + insn.imm) & MASK32
    elif isinstance(insn, isa.MovPcR0):
        # ALU writes to pc branch without interworking; bit 0 is dropped.
        next_pc = state.regs[0] & ~1
    elif isinstance(insn, isa.Bl):
        state.lr = (pc + 4) | 1
        next_pc = insn.target & ~1
    elif isinstance(insn, isa.BranchW):
        next_pc = insn.target & ~1
    elif isinstance(insn, isa.MovImm):
        state.regs[insn.rd] = insn.imm
    elif isinstance(insn, isa.MovReg):
        state.regs[insn.rd] = state.regs[insn.rm]
    elif isinstance(insn, isa.AddReg):
        state.regs[insn.rd] = (state.regs[insn.rn] + state.regs[insn.rm]) & MASK32
    elif isinstance(insn, isa.SubReg):
        state.regs[insn.rd] = (state.regs[insn.rn] - state.regs[insn.rm]) & MASK32
    elif isinstance(insn, isa.StrSpRel):
        addr = state.sp + insn.offset
        state.write(addr, 4, state.regs[insn.rt])
        access = ("store", addr, state.regs[insn.rt])
    elif isinstance(insn, isa.LdrSpRel):
        addr = state.sp + insn.offset
        state.regs[insn.rt] = state.read(addr, 4)
        access = ("load", addr, state.regs[insn.rt])
    elif isinstance(insn, isa.AddSpImm):
        state.sp = state.sp + insn.imm
        _check_sp(state)
    elif isinstance(insn, isa.SubSpImm):
        state.sp = state.sp - insn.imm
        _check_sp(state)
    elif isinstance(insn, isa.Nop):
        pass
    else:  # Unknown / RawWord
        raise MachineFault(FaultKind.UNDECODABLE, f"at 0x{pc:08x}: {insn.text()}")

    state.pc = next_pc
    event = TraceEvent(state.step_count, pc, insn, sp_before, state.sp, access)
    state.step_count += 1
    return event


@dataclass
class CallResult:
    state: MachineState
    trace: list[TraceEvent]

    def trace_lines(self) -> list[str]:
        return [event.line() for event in self.trace]


def call(
    image,
    table=None,
    entry: int | None = None,
    regs: dict[int, int] | None = None,
    *,
    sentinel: int = DEFAULT_SENTINEL,
    budget: int = DEFAULT_STEP_BUDGET,
    keep_trace: bool = True,
) -> CallResult:
    """Run a function at ``entry`` until it returns to ``sentinel``.

    The callee sees lr holding the sentinel (thumb bit set) and a small
    pre-seeded caller stack above sp.  Raises ``MachineFault`` on any fault,
    including exhausting the step budget.
    """
    state = make_state(image, table, regs=regs)
    state.sp = state.stack_top - CALLER_STACK_BYTES
    for i in range(CALLER_STACK_BYTES // 4):
        state.write(state.sp + 4 * i, 4, 0xCA000000 + i)
    state.lr = sentinel | 1
    state.pc = (entry if entry is not None else image.base) & ~1
    trace: list[TraceEvent] = []
    while state.pc != sentinel:
        if state.step_count >= budget:
            raise MachineFault(FaultKind.BUDGET, f"after {budget} steps")
        event = step(state)
        if keep_trace:
            trace.append(event)
    return CallResult(state, trace)


def check_gadget(
    image,
    table,
    start: int,
    stack_delta: int,
    pc_slot_index: int | None,
    *,
    sentinel: int = DEFAULT_SENTINEL,
    budget: int = 2000,
    filler: int = 0x40404040,
) -> bool:
    """Verify one gadget candidate by running it.

    The stack words the gadget will consume are seeded with filler values,
    the designated slot (or lr, for bx-lr gadgets) receives the sentinel,
    and the candidate passes when control reaches the sentinel with sp
    advanced by exactly ``stack_delta``.
    """
    state = make_state(image, table)
    words = stack_delta // 4
    state.sp = state.stack_top - stack_delta
    for i in range(words):
        value = (sentinel | 1) if i == pc_slot_index else (filler + i)
        state.write(state.sp + 4 * i, 4, value)
    if pc_slot_index is None:
        state.lr = sentinel | 1
    sp0 = state.sp
    state.pc = start & ~1
    try:
        while state.pc != sentinel:
            if state.step_count >= budget:
                return False
            step(state)
    except MachineFault:
        return False
    return state.sp == sp0 + stack_delta


def states_equivalent(a: MachineState, b: MachineState) -> bool:
    """Caller-observable equivalence of two final states.

    Compares the callee-saved registers (r4-r11), sp, and the caller-visible
    stack bytes at and above sp.  pc, lr and the step count are excluded, as
    are the caller-saved registers r0-r3/r12 (dead across a return under the
    procedure-call standard; the table detour clobbers r0 by design) and the
    table region (only one of the two runs may have one installed).
    """
    if a.sp != b.sp:
        return False
    if any(a.regs[i] != b.regs[i] for i in isa.CALLEE_SAVED):
        return False
    if a.stack_top != b.stack_top or a.sram_base != b.sram_base:
        return False
    lo_a, hi_a = a.sp - a.sram_base, a.stack_top - a.sram_base
    lo_b, hi_b = b.sp - b.sram_base, b.stack_top - b.sram_base
    return a.sram[lo_a:hi_a] == b.sram[lo_b:hi_b]
