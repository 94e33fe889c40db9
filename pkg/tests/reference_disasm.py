"""Independent reference disassembler used as the codec oracle.

Written directly from the architecture manual bit patterns as match strings,
on purpose sharing no code with retobf.isa: patterns are matched character
by character and rendered to assembler text.  Tests cross-check the codec
against this table exhaustively over the 16-bit space and over sampled wide
encodings.
"""

REG = [f"r{i}" for i in range(13)] + ["sp", "lr", "pc"]


def _fields(pattern, value, width):
    """Match ``value`` against ``pattern`` ('0', '1', or letter per bit,
    msb first).  Returns dict of letter -> int, or None on mismatch."""
    bits = format(value, f"0{width}b")
    out = {}
    for ch, bit in zip(pattern, bits):
        if ch == "0" and bit != "0":
            return None
        if ch == "1" and bit != "1":
            return None
        if ch.isalpha():
            out[ch] = out.get(ch, 0) * 2 + int(bit)
    return out


def _reglist(bits, extra=None):
    names = [REG[i] for i in range(16) if bits & (1 << i)]
    if extra:
        names.append(extra)
    return "{" + ", ".join(names) + "}"


def _narrow_table():
    return [
        ("0010 0ddd iiii iiii", lambda f: f"movs {REG[f['d']]}, #{f['i']}"),
        ("0001 100m mmnn nddd", lambda f: f"adds {REG[f['d']]}, {REG[f['n']]}, {REG[f['m']]}"),
        ("0001 101m mmnn nddd", lambda f: f"subs {REG[f['d']]}, {REG[f['n']]}, {REG[f['m']]}"),
        ("0011 0000 iiii iiii", lambda f: f"adds r0, #{f['i']}"),
        ("0100 0110 Dmmm mddd", lambda f: _mov_reg(f)),
        ("0100 0111 0111 0000", lambda f: "bx lr"),
        ("0100 1000 iiii iiii", lambda f: f"ldr r0, [pc, #{f['i'] * 4}]"),
        ("1001 0ttt iiii iiii", lambda f: f"str {REG[f['t']]}, [sp, #{f['i'] * 4}]"),
        ("1001 1ttt iiii iiii", lambda f: f"ldr {REG[f['t']]}, [sp, #{f['i'] * 4}]"),
        ("1011 0000 0iii iiii", lambda f: f"add sp, #{f['i'] * 4}"),
        ("1011 0000 1iii iiii", lambda f: f"sub sp, #{f['i'] * 4}"),
        ("1011 010M rrrr rrrr", lambda f: _push_pop("push", f, "lr")),
        ("1011 110M rrrr rrrr", lambda f: _push_pop("pop", f, "pc")),
        ("1011 1111 0000 0000", lambda f: "nop"),
    ]


def _mov_reg(f):
    rd = f["d"] | (f["D"] << 3)
    rm = f["m"]
    if rd == 15 and rm == 0:
        return "mov pc, r0"
    if rd > 12 or rm > 12:
        return None
    return f"mov {REG[rd]}, {REG[rm]}"


def _push_pop(op, f, flag_name):
    if not f["r"] and not f["M"]:
        return None
    return f"{op} " + _reglist(f["r"], flag_name if f["M"] else None)


def disasm16(hw):
    """Render a 16-bit encoding, or None when outside the covered subset
    (including halfwords that are 32-bit instruction prefixes)."""
    if (hw >> 11) in (0b11101, 0b11110, 0b11111):
        return None
    for pattern, render in _narrow_table():
        f = _fields(pattern.replace(" ", ""), hw, 16)
        if f is not None:
            return render(f)
    return None


def disasm32(hw1, hw2, address=0):
    """Render a 32-bit encoding (canonical wide forms only), or None."""
    word = (hw1 << 16) | hw2
    f = _fields("1110100100101101" + "0M0rrrrrrrrrrrrr", word, 32)
    if f is not None and f["r"] >> 8:
        return "push " + _reglist(f["r"], "lr" if f["M"] else None)
    f = _fields("1110100010111101" + "PM0rrrrrrrrrrrrr", word, 32)
    if f is not None and not (f["P"] and f["M"]) and (f["M"] or f["r"] >> 8):
        extra = "pc" if f["P"] else ("lr" if f["M"] else None)
        if f["r"] or extra:
            return "pop " + _reglist(f["r"], extra)
    for second, name in (("11J1Kiiiiiiiiiii", "bl"), ("10J1Kiiiiiiiiiii", "b.w")):
        f = _fields("11110Sjjjjjjjjjj" + second, word, 32)
        if f is not None:
            i1 = 1 - (f["J"] ^ f["S"])
            i2 = 1 - (f["K"] ^ f["S"])
            imm = (
                (f["S"] << 24)
                | (i1 << 23)
                | (i2 << 22)
                | (f["j"] << 12)
                | (f["i"] << 1)
            )
            if f["S"]:
                imm -= 1 << 25
            return f"{name} 0x{(address + 4 + imm) & 0xFFFFFFFF:x}"
    return None
