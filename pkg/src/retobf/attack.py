"""De-obfuscation pipeline: everything here sees image bytes only.

The locator replays the boot pass's own signature scan; the two recovery
methods then reconstruct each hidden return's register list from prologue
symmetry and from callee-saved register usage, and the catalog builder
turns predictions into usable gadget entries (stack delta plus the slot the
next chain address goes in).  Ground truth enters only in
``evaluate_recovery``, which is the evaluator's tool, not the attacker's.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from . import isa
from ._rewrite import TRAMPOLINE_CORE
from .image import FirmwareImage, Manifest
from .isa import (
    AddReg,
    AddSpImm,
    Bl,
    LdrSpRel,
    MovImm,
    MovReg,
    Nop,
    Pop,
    Push,
    RegisterList,
    SubReg,
    decode,
    is_return,
)
from .obfuscation import scan_trampolines, sweep_plaintext, trampoline_data_ranges

SYMMETRY_WINDOW = 512
LIVENESS_WINDOW = 2048
GADGET_WINDOW = 8

#: Confidence levels, fixed so reports are stable:
#: an unambiguous prologue in the site's own code run scores highest, then a
#: leaf verdict, then an anchor recovered across intervening trampolines,
#: then a bare region boundary (sealed-prologue images).
CONF_PROLOGUE = 1.0
CONF_LEAF = 0.9
CONF_EXTENDED = 0.8
CONF_REGION = 0.7
CONF_FLOOR = 0.05


class AttackError(Exception):
    pass


class LineageError(AttackError):
    """Attack output and manifest belong to different image builds."""


@dataclass(frozen=True)
class TrampolineSite:
    """A located trampoline, reconstructed purely from image bytes."""

    address: int
    adds_imm: int
    literal_value: int
    encrypted_halfword: int
    inferred_table_offset: int

    @property
    def entry_address(self) -> int:
        return self.literal_value + self.adds_imm


def find_trampolines(image: FirmwareImage) -> list[TrampolineSite]:
    """Locate every halfword-aligned trampoline signature, exactly the way
    the boot-time initialization does."""
    raw = scan_trampolines(image.data, image.base)
    if not raw:
        return []
    min_entry = min(s.entry_address for s in raw)
    return [
        TrampolineSite(
            address=s.core,
            adds_imm=s.adds_imm,
            literal_value=s.literal_value,
            encrypted_halfword=int.from_bytes(s.enc_window[0:2], "little"),
            inferred_table_offset=s.entry_address - min_entry,
        )
        for s in sorted(raw, key=lambda s: s.core)
    ]


class ImageView:
    """Code segments of an image with trampoline regions cut out."""

    def __init__(self, image: FirmwareImage, sites: list[TrampolineSite]):
        self.image = image
        self.sites = sorted(sites, key=lambda s: s.address)
        regions = [(s.address, s.address + TRAMPOLINE_CORE) for s in self.sites]
        self.segments: list[tuple[int, int]] = []
        cursor = image.base
        for lo, hi in regions:
            self.segments.append((cursor, lo))
            cursor = hi
        self.segments.append((cursor, image.end))
        self._decoded: dict[int, list] = {}

    def segment_before(self, addr: int) -> int:
        """Index of the segment that ends exactly at ``addr``."""
        for idx, (lo, hi) in enumerate(self.segments):
            if hi == addr and lo <= addr:
                return idx
        raise AttackError(f"no code segment ends at 0x{addr:x}")

    def decoded(self, idx: int) -> list:
        """[(address, instruction)] for one segment; tolerant of junk."""
        if idx not in self._decoded:
            lo, hi = self.segments[idx]
            out = []
            addr = lo
            data = self.image.data
            while addr < hi:
                try:
                    insn, length = decode(data, addr - self.image.base, addr)
                except isa.TruncatedStreamError:
                    insn, length = isa.Unknown(0), hi - addr
                if addr + length > hi:
                    insn, length = isa.Unknown(0), hi - addr
                out.append((addr, insn))
                addr += length
            self._decoded[idx] = out
        return self._decoded[idx]


@dataclass
class Prediction:
    """One method's verdict for one site.

    ``kind`` is "pop" (with ``reglist``), "bx_lr" (a link-register return:
    nothing is popped), or "ambiguous" (methods disagreed; see ``union`` and
    ``intersection``).  A method that could not run yields ``ok=False`` with
    a reason, which is distinct from a wrong prediction.
    """

    site: TrampolineSite
    method: str
    ok: bool
    kind: str | None = None
    reglist: RegisterList | None = None
    confidence: float = 0.0
    reason: str = ""
    union: RegisterList | None = None
    intersection: RegisterList | None = None

    def to_json(self) -> dict:
        return {
            "site": f"0x{self.site.address:x}",
            "method": self.method,
            "ok": self.ok,
            "kind": self.kind,
            "reglist": None if self.reglist is None else list(self.reglist.names()),
            "confidence": round(self.confidence, 4),
            "reason": self.reason,
            "union": None if self.union is None else list(self.union.names()),
            "intersection": None
            if self.intersection is None
            else list(self.intersection.names()),
        }


def _written_callee_saved(insns) -> RegisterList:
    mask = 0
    for _, insn in insns:
        dest = None
        if isinstance(insn, (MovImm, MovReg, AddReg, SubReg)):
            dest = insn.rd
        elif isinstance(insn, LdrSpRel):
            dest = insn.rt
        elif isinstance(insn, Pop):
            mask |= insn.regs.mask & 0x0FF0
        if dest is not None and 4 <= dest <= 11:
            mask |= 1 << dest
    return RegisterList(mask & 0x0FF0)


def _has_call(insns) -> bool:
    return any(isinstance(insn, Bl) for _, insn in insns)


def _real_code(insns) -> bool:
    return any(not isinstance(insn, (Nop, isa.Unknown)) for _, insn in insns)


def recover_by_symmetry(
    image: FirmwareImage,
    site: TrampolineSite,
    sites: list[TrampolineSite] | None = None,
    *,
    window: int = SYMMETRY_WINDOW,
    view: ImageView | None = None,
) -> Prediction:
    """Predict the hidden pop from the nearest preceding push-with-lr.

    Prologues and epilogues are symmetrical: the epilogue pops what the
    prologue pushed, with lr replaced by pc.  The backward scan steps over
    intervening trampolines (they are recognizable), paying a confidence
    penalty per region crossed and per extra push in range.
    """
    view = view or ImageView(image, sites if sites is not None else find_trampolines(image))
    seg = view.segment_before(site.address)
    found = None
    distance = 0
    crossed = 0
    extra_pushes = 0
    for idx in range(seg, -1, -1):
        for addr, insn in reversed(view.decoded(idx)):
            distance = site.address - addr
            if distance > window:
                break
            if isinstance(insn, Push) and insn.regs.has_lr:
                if found is None:
                    found = (addr, insn, distance, crossed)
                else:
                    extra_pushes += 1
        if distance > window or idx == 0:
            break
        crossed += 1
    if found is None:
        return Prediction(site, "symmetry", ok=False, reason="no push-with-lr within window")
    addr, push, dist, crossed_at = found
    confidence = max(
        CONF_FLOOR,
        1.0 - 0.5 * dist / window - 0.1 * crossed_at - 0.05 * extra_pushes,
    )
    return Prediction(
        site,
        "symmetry",
        ok=True,
        kind="pop",
        reglist=push.regs.with_pc_for_lr(),
        confidence=confidence,
    )


def recover_by_liveness(
    image: FirmwareImage,
    site: TrampolineSite,
    sites: list[TrampolineSite] | None = None,
    *,
    window: int = LIVENESS_WINDOW,
    view: ImageView | None = None,
) -> Prediction:
    """Predict the hidden pop from callee-saved register usage.

    A callee must save every callee-saved register it writes, so the set
    written by the function body is the set popped at its returns.  The
    enclosing function is delimited by the nearest plaintext prologue when
    one survives; otherwise the trampoline region boundary itself serves
    (sealed prologues), and a code run that neither calls out nor touches
    callee-saved registers is classified as a leaf returning via lr.
    """
    view = view or ImageView(image, sites if sites is not None else find_trampolines(image))
    seg = view.segment_before(site.address)
    w0 = view.decoded(seg)
    anchor = None
    for addr, insn in reversed(w0):
        if isinstance(insn, Push) and insn.regs.has_lr:
            anchor = addr
            break
    if anchor is not None:
        tail = [(a, i) for a, i in w0 if a > anchor]
        return Prediction(
            site,
            "liveness",
            ok=True,
            kind="pop",
            reglist=_written_callee_saved(tail).union(RegisterList.of("pc")),
            confidence=CONF_PROLOGUE,
        )
    if not _real_code(w0):
        return Prediction(
            site, "liveness", ok=False, reason="no function body precedes site"
        )
    if not _has_call(w0) and _written_callee_saved(w0).is_empty:
        return Prediction(site, "liveness", ok=True, kind="bx_lr", confidence=CONF_LEAF)
    # The body continues past an intervening trampoline: walk back looking
    # for the prologue, accumulating writes from every code run crossed.
    collected = list(w0)
    for idx in range(seg - 1, -1, -1):
        insns = view.decoded(idx)
        if insns and site.address - insns[0][0] > window:
            break
        pushes = [a for a, i in insns if isinstance(i, Push) and i.regs.has_lr]
        if pushes:
            anchor = max(pushes)
            collected = [(a, i) for a, i in insns if a > anchor] + collected
            return Prediction(
                site,
                "liveness",
                ok=True,
                kind="pop",
                reglist=_written_callee_saved(collected).union(RegisterList.of("pc")),
                confidence=CONF_EXTENDED,
            )
        collected = insns + collected
    # No plaintext prologue in range (sealed pushes): the code run between
    # the preceding trampoline and the site is the best function-body
    # estimate.
    return Prediction(
        site,
        "liveness",
        ok=True,
        kind="pop",
        reglist=_written_callee_saved(w0).union(RegisterList.of("pc")),
        confidence=CONF_REGION,
    )


def combine_predictions(sym: Prediction | None, live: Prediction | None) -> Prediction:
    """Cross-check the two methods; keep honest uncertainty on disagreement."""
    inputs = [p for p in (sym, live) if p is not None]
    if not inputs:
        raise AttackError("combine needs at least one prediction")
    site = inputs[0].site
    ok = [p for p in inputs if p.ok]
    if not ok:
        return Prediction(
            site, "combined", ok=False, reason="; ".join(p.reason for p in inputs)
        )
    if len(ok) == 1:
        p = ok[0]
        return Prediction(
            site, "combined", ok=True, kind=p.kind, reglist=p.reglist,
            confidence=p.confidence, reason=f"single method: {p.method}",
        )
    a, b = ok
    if a.kind == b.kind and a.reglist == b.reglist:
        return Prediction(
            site, "combined", ok=True, kind=a.kind, reglist=a.reglist,
            confidence=max(a.confidence, b.confidence),
        )
    penalty = 0.5 * min(a.confidence, b.confidence)
    if a.kind == "pop" and b.kind == "pop":
        return Prediction(
            site, "combined", ok=True, kind="ambiguous",
            union=a.reglist.union(b.reglist),
            intersection=a.reglist.intersection(b.reglist),
            confidence=penalty,
            reason="methods disagree on the register list",
        )
    return Prediction(
        site, "combined", ok=True, kind="ambiguous", confidence=penalty,
        reason=f"methods disagree on return shape ({a.kind} vs {b.kind})",
    )


@dataclass
class GadgetCandidate:
    """A usable gadget: where to enter, how far sp advances through the
    return, and which consumed stack word becomes the next chain address
    (None for lr-routed bx-lr returns)."""

    start: int
    site_address: int
    instructions: list[str]
    stack_delta: int
    pc_slot_index: int | None

    def to_json(self) -> dict:
        return {
            "start": f"0x{self.start:x}",
            "site": f"0x{self.site_address:x}",
            "instructions": self.instructions,
            "stack_delta": self.stack_delta,
            "pc_slot_index": self.pc_slot_index,
        }


def _admissible(insn, kind: str) -> bool:
    """Window instructions must have a statically known, non-negative stack
    effect and no stores into the attacker-seeded stack; windows ending in a
    bx-lr return additionally must leave lr intact."""
    if isinstance(insn, (MovImm, MovReg, AddReg, SubReg, Nop, LdrSpRel, AddSpImm)):
        return True
    if isinstance(insn, Bl):
        return kind == "pop"
    if isinstance(insn, Pop) and not insn.regs.has_pc:
        return kind == "pop" or not insn.regs.has_lr
    return False


def _sp_words(insn) -> int:
    if isinstance(insn, AddSpImm):
        return insn.imm // 4
    if isinstance(insn, Pop):
        return len(insn.regs)
    return 0


def _candidates_for(
    window_insns: list,
    terminator: tuple[str, RegisterList | None],
    site_address: int,
    window: int,
) -> list[GadgetCandidate]:
    kind, reglist = terminator
    out = []
    for k in range(0, min(window, len(window_insns)) + 1):
        suffix = window_insns[len(window_insns) - k :]
        if any(not _admissible(insn, kind) for _, insn in suffix):
            continue
        sp_words = sum(_sp_words(insn) for _, insn in suffix)
        if kind == "pop":
            m = len(reglist)
            delta = 4 * (sp_words + m)
            slot = sp_words + m - 1
        else:
            delta = 4 * sp_words
            slot = None
        start = suffix[0][0] if suffix else site_address
        out.append(
            GadgetCandidate(
                start=start,
                site_address=site_address,
                instructions=[insn.text() for _, insn in suffix],
                stack_delta=delta,
                pc_slot_index=slot,
            )
        )
    return out


def build_gadget_catalog(
    image: FirmwareImage,
    predictions: list[Prediction],
    window: int = GADGET_WINDOW,
    *,
    view: ImageView | None = None,
) -> list[GadgetCandidate]:
    """Expand each usable prediction into gadget candidates: the bare return
    plus every admissible instruction window leading into it."""
    if not predictions:
        return []
    view = view or ImageView(image, find_trampolines(image))
    catalog = []
    for pred in predictions:
        if not pred.ok or pred.kind not in ("pop", "bx_lr"):
            continue
        seg = view.segment_before(pred.site.address)
        terminator = (pred.kind, pred.reglist)
        catalog.extend(
            _candidates_for(view.decoded(seg), terminator, pred.site.address, window)
        )
    return catalog


def baseline_gadget_scan(
    image: FirmwareImage, window: int = GADGET_WINDOW
) -> list[GadgetCandidate]:
    """The classic sweep: find every plaintext return and emit backward
    windows.  On an obfuscated image (trampoline data slots masked out, as
    any competent scanner would once it has located them) this returns
    nothing: the starting points are gone."""
    exclude = trampoline_data_ranges(image)
    hits = sweep_plaintext(image.data, exclude=exclude, want="returns")
    sites = find_trampolines(image)
    view = ImageView(image, sites)
    catalog = []
    for off in hits:
        addr = image.base + off
        insn, _ = decode(image.data, off, addr)
        if not is_return(insn):
            continue  # raw pattern straddling data; not a decodable return
        if isinstance(insn, Pop):
            terminator = ("pop", insn.regs)
        else:
            terminator = ("bx_lr", None)
        try:
            seg_idx = next(
                i for i, (lo, hi) in enumerate(view.segments) if lo <= addr < hi
            )
        except StopIteration:
            continue
        preceding = [(a, i) for a, i in view.decoded(seg_idx) if a < addr]
        catalog.extend(_candidates_for(preceding, terminator, addr, window))
    return catalog


@dataclass
class AttackResult:
    image_sha256: str
    sites: list[TrampolineSite]
    predictions: dict[str, list[Prediction]]
    catalog: list[GadgetCandidate]

    def predictions_at(self, method: str) -> dict[int, Prediction]:
        return {p.site.address: p for p in self.predictions[method]}

    def to_json(self) -> dict:
        return {
            "image_sha256": self.image_sha256,
            "sites": [
                {
                    "address": f"0x{s.address:x}",
                    "adds_imm": s.adds_imm,
                    "literal_value": f"0x{s.literal_value:x}",
                    "encrypted_halfword": f"0x{s.encrypted_halfword:04x}",
                    "inferred_table_offset": s.inferred_table_offset,
                }
                for s in self.sites
            ],
            "predictions": {
                method: [p.to_json() for p in preds]
                for method, preds in self.predictions.items()
            },
            "gadget_count": len(self.catalog),
        }


def run_attack(
    image: FirmwareImage,
    *,
    symmetry_window: int = SYMMETRY_WINDOW,
    liveness_window: int = LIVENESS_WINDOW,
    gadget_window: int = GADGET_WINDOW,
) -> AttackResult:
    """Full pipeline over image bytes: locate, recover by both methods,
    cross-check, and build the gadget catalog from the combined verdicts."""
    sites = find_trampolines(image)
    view = ImageView(image, sites)
    sym = [
        recover_by_symmetry(image, s, sites, window=symmetry_window, view=view)
        for s in sites
    ]
    live = [
        recover_by_liveness(image, s, sites, window=liveness_window, view=view)
        for s in sites
    ]
    combined = [combine_predictions(a, b) for a, b in zip(sym, live)]
    catalog = build_gadget_catalog(image, combined, gadget_window, view=view)
    return AttackResult(
        image_sha256=hashlib.sha256(image.data).hexdigest(),
        sites=sites,
        predictions={"symmetry": sym, "liveness": live, "combined": combined},
        catalog=catalog,
    )


# ---------------------------------------------------------------------------
# Evaluation (ground truth enters here and only here)


@dataclass
class MethodMetrics:
    total_pop_sites: int = 0
    exact: int = 0
    failures: int = 0
    reg_tp: int = 0
    reg_fp: int = 0
    reg_fn: int = 0
    leaf_total: int = 0
    leaf_correct: int = 0
    fn_total: int = 0
    fn_exact: int = 0
    pad_predicted: int = 0
    calibration: list = field(default_factory=list)

    @property
    def exact_rate(self) -> float | None:
        return None if not self.total_pop_sites else self.exact / self.total_pop_sites

    @property
    def fn_exact_rate(self) -> float | None:
        return None if not self.fn_total else self.fn_exact / self.fn_total

    @property
    def reg_precision(self) -> float | None:
        denom = self.reg_tp + self.reg_fp
        return None if not denom else self.reg_tp / denom

    @property
    def reg_recall(self) -> float | None:
        denom = self.reg_tp + self.reg_fn
        return None if not denom else self.reg_tp / denom

    def to_json(self) -> dict:
        return {
            "pop_sites": self.total_pop_sites,
            "exact": self.exact,
            "exact_rate": self.exact_rate,
            "failures": self.failures,
            "register_precision": self.reg_precision,
            "register_recall": self.reg_recall,
            "leaf_sites": self.leaf_total,
            "leaf_correct": self.leaf_correct,
            "functions": self.fn_total,
            "function_exact_rate": self.fn_exact_rate,
            "pad_registers_predicted": self.pad_predicted,
            "confidence_calibration": self.calibration,
        }


@dataclass
class RecoveryReport:
    empty: bool
    site_recall: float | None
    false_positives: int
    truth_sites: int
    found_sites: int
    methods: dict[str, MethodMetrics]

    def to_json(self) -> dict:
        return {
            "empty": self.empty,
            "truth_sites": self.truth_sites,
            "found_sites": self.found_sites,
            "site_recall": self.site_recall,
            "false_positives": self.false_positives,
            "methods": {name: m.to_json() for name, m in self.methods.items()},
        }

    def text_table(self) -> str:
        lines = [
            f"{'method':<10} {'sites':>6} {'exact':>6} {'rate':>7} "
            f"{'fail':>5} {'prec':>6} {'rec':>6} {'fn-rate':>8}"
        ]
        for name, m in self.methods.items():
            rate = "-" if m.exact_rate is None else f"{m.exact_rate:.3f}"
            prec = "-" if m.reg_precision is None else f"{m.reg_precision:.3f}"
            rec = "-" if m.reg_recall is None else f"{m.reg_recall:.3f}"
            fn_rate = "-" if m.fn_exact_rate is None else f"{m.fn_exact_rate:.3f}"
            lines.append(
                f"{name:<10} {m.total_pop_sites:>6} {m.exact:>6} {rate:>7} "
                f"{m.failures:>5} {prec:>6} {rec:>6} {fn_rate:>8}"
            )
        lines.append(
            f"sites: {self.found_sites}/{self.truth_sites} found, "
            f"{self.false_positives} false positive(s)"
        )
        return "\n".join(lines)


_BUCKETS = [(0.0, 0.5), (0.5, 0.8), (0.8, 0.95), (0.95, 1.01)]


def evaluate_recovery(result: AttackResult, manifest: Manifest, image: FirmwareImage) -> RecoveryReport:
    """Score attack output against ground truth (same image lineage only)."""
    recorded = manifest.latest_sha()
    if recorded != result.image_sha256 or image.sha256() != result.image_sha256:
        raise LineageError("attack output and manifest describe different images")
    records = manifest.trampoline_records()
    truth_by_addr = {}
    fn_by_name = {fn.name: fn for fn in manifest.functions}
    for rec in records:
        fn = fn_by_name[rec.fn]
        truth_by_addr[rec.core] = (rec, fn)
    found_addrs = {s.address for s in result.sites}
    truth_addrs = set(truth_by_addr)
    recall = None
    if truth_addrs:
        recall = len(found_addrs & truth_addrs) / len(truth_addrs)
    false_positives = len(found_addrs - truth_addrs)

    methods = {}
    for method in ("symmetry", "liveness", "combined"):
        metrics = MethodMetrics()
        preds = result.predictions_at(method)
        buckets = [[0, 0] for _ in _BUCKETS]
        fn_pop_sites: dict[str, list[bool]] = {}
        for addr, (rec, fn) in truth_by_addr.items():
            pred = preds.get(addr)
            if rec.kind == "push":
                continue
            if fn.is_leaf:
                metrics.leaf_total += 1
                if pred is not None and pred.ok and pred.kind == "bx_lr":
                    metrics.leaf_correct += 1
                continue
            metrics.total_pop_sites += 1
            truth = fn.true_pop
            exact = False
            if pred is None or not pred.ok:
                metrics.failures += 1
            else:
                if pred.kind == "pop" and pred.reglist is not None:
                    exact = pred.reglist == truth
                    got = pred.reglist.without_flags()
                    want = truth.without_flags()
                    metrics.reg_tp += len(got.intersection(want))
                    metrics.reg_fp += len(got.difference(want))
                    metrics.reg_fn += len(want.difference(got))
                    if not got.intersection(fn.pad_registers).is_empty:
                        metrics.pad_predicted += 1
                for i, (lo, hi) in enumerate(_BUCKETS):
                    if lo <= pred.confidence < hi:
                        buckets[i][0] += 1
                        buckets[i][1] += int(exact)
            metrics.exact += int(exact)
            fn_pop_sites.setdefault(fn.name, []).append(exact)
        metrics.fn_total = len(fn_pop_sites)
        metrics.fn_exact = sum(1 for flags in fn_pop_sites.values() if all(flags))
        metrics.calibration = [
            {"bucket": f"[{lo},{hi})", "count": n, "exact": e}
            for (lo, hi), (n, e) in zip(_BUCKETS, buckets)
        ]
        methods[method] = metrics

    return RecoveryReport(
        empty=not truth_addrs and not found_addrs,
        site_recall=recall,
        false_positives=false_positives,
        truth_sites=len(truth_addrs),
        found_sites=len(found_addrs),
        methods=methods,
    )
