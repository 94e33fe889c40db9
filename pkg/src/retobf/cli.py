"""Command-line pipeline: gen, obfuscate, init, attack, harden, eval.

Every command is deterministic given its flags and input digests; reports
embed both so regenerating a run yields byte-identical outputs.  The attack
command reads the raw image only: it never opens a manifest.
"""

from __future__ import annotations

import argparse
import json
import os
import random
import sys
from pathlib import Path

from . import harden as harden_mod
from . import image as image_mod
from . import machine, obfuscation
from .attack import (
    AttackResult,
    GadgetCandidate,
    LineageError,
    Prediction,
    TrampolineSite,
    baseline_gadget_scan,
    evaluate_recovery,
    run_attack,
)
from .image import CorpusParams, FirmwareImage, ImageError, load, save
from .isa import RegisterList
from .machine import MachineFault, call, check_gadget, states_equivalent
from .obfuscation import ObfuscationError, build_table

KEY_ENV = "RETOBF_KEY"


class CliError(Exception):
    pass


def _dump_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _parse_key(value: str | None) -> int:
    raw = value if value is not None else os.environ.get(KEY_ENV)
    if raw is None:
        raise CliError(f"a key is required (--key or ${KEY_ENV})")
    try:
        key = int(raw, 16) if isinstance(raw, str) else raw
    except ValueError as exc:
        raise CliError(f"bad key {raw!r}: {exc}") from exc
    return obfuscation.check_key(key)


def _hex(value: str) -> int:
    return int(value, 16)


def _echo(args, **extra) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k not in ("func",) and v is not None}
    cfg.pop("key", None)  # never echo key material into reports
    cfg.update(extra)
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(cfg.items())}


def cmd_gen(args) -> int:
    params = CorpusParams(
        function_count=args.functions,
        seed=args.seed,
        leaf_ratio=args.leaf_ratio,
        multi_epilogue_prob=args.multi_epilogue_prob,
        high_reg_prob=args.high_reg_prob,
    )
    image, manifest = image_mod.generate_corpus(params)
    bin_path, json_path = save(image, manifest, args.out)
    print(f"wrote {bin_path} ({len(image.data)} bytes, "
          f"{len(manifest.functions)} functions) and {json_path}")
    return 0


def cmd_obfuscate(args) -> int:
    key = _parse_key(args.key)
    image, manifest = load(args.input)
    obf, man2, records = obfuscation.obfuscate_returns(image, manifest, key)
    save(obf, man2, args.out)
    sites = Path(str(args.out) + ".sites.json")
    _dump_json(sites, {"sites": [rec.to_json() for rec in records]})
    print(f"sealed {len(records)} return(s); wrote {args.out}.bin and {sites}")
    return 0


def cmd_init(args) -> int:
    key = _parse_key(args.key)
    image, manifest = load(args.input)
    if args.seed is not None and manifest.has_pass("encrypt_pushes"):
        table = harden_mod.build_rotated_table(image, manifest, key, args.seed)
    else:
        table = build_table(image, key)
    out = Path(args.out if args.out else str(args.input) + ".table.json")
    payload = table.to_json()
    payload["image_sha256"] = image.sha256()
    _dump_json(out, payload)
    print(f"rebuilt {len(table.entries)} table entrie(s) -> {out}")
    return 0


def cmd_attack(args) -> int:
    bin_path = Path(args.input).with_suffix(".bin")
    image = FirmwareImage(base=args.base, data=bin_path.read_bytes())
    result = run_attack(image)
    out = Path(args.out)
    report = result.to_json()
    report["config"] = _echo(args)
    if not result.sites:
        report["note"] = "no trampolines located; image looks unobfuscated"
    _dump_json(Path(str(out) + ".attack.json"), report)
    gadget_path = Path(str(out) + ".gadgets.jsonl")
    gadget_path.parent.mkdir(parents=True, exist_ok=True)
    with gadget_path.open("w") as fh:
        for cand in result.catalog:
            fh.write(json.dumps(cand.to_json(), sort_keys=True) + "\n")
    lines = [
        f"sites located: {len(result.sites)}",
        f"gadget candidates: {len(result.catalog)}",
    ]
    for method, preds in result.predictions.items():
        ok = sum(p.ok for p in preds)
        lines.append(f"{method}: {ok}/{len(preds)} sites with a verdict")
    text = "\n".join(lines)
    Path(str(out) + ".attack.txt").write_text(text + "\n")
    print(text if args.format == "text" else json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_harden(args) -> int:
    key = _parse_key(args.key)
    image, manifest = load(args.input)
    himg, hman, plans = harden_mod.harden(
        image,
        manifest,
        key,
        kmax=args.kmax,
        rotate=args.rotate == "on",
        encrypt_push=args.encrypt_push == "on",
        seed=args.seed,
    )
    save(himg, hman, args.out)
    padded = sum(1 for p in plans if not p.extra.is_empty)
    print(
        f"hardened {len(hman.functions)} function(s): {padded} padded, "
        f"rotate={args.rotate}, encrypt-push="
        f"{'on' if args.rotate == 'on' else args.encrypt_push}; wrote {args.out}.bin"
    )
    return 0


def _result_from_json(obj: dict, catalog: list) -> AttackResult:
    sites = {}
    for entry in obj["sites"]:
        site = TrampolineSite(
            address=int(entry["address"], 16),
            adds_imm=entry["adds_imm"],
            literal_value=int(entry["literal_value"], 16),
            encrypted_halfword=int(entry["encrypted_halfword"], 16),
            inferred_table_offset=entry["inferred_table_offset"],
        )
        sites[site.address] = site
    predictions = {}
    for method, preds in obj["predictions"].items():
        out = []
        for p in preds:
            out.append(
                Prediction(
                    site=sites[int(p["site"], 16)],
                    method=p["method"],
                    ok=p["ok"],
                    kind=p["kind"],
                    reglist=None
                    if p["reglist"] is None
                    else RegisterList.from_names(p["reglist"]),
                    confidence=p["confidence"],
                    reason=p["reason"],
                    union=None if p["union"] is None else RegisterList.from_names(p["union"]),
                    intersection=None
                    if p["intersection"] is None
                    else RegisterList.from_names(p["intersection"]),
                )
            )
        predictions[method] = out
    return AttackResult(
        image_sha256=obj["image_sha256"],
        sites=sorted(sites.values(), key=lambda s: s.address),
        predictions=predictions,
        catalog=catalog,
    )


def _load_attack(prefix) -> AttackResult:
    obj = json.loads(Path(str(prefix) + ".attack.json").read_text())
    catalog = []
    gadget_path = Path(str(prefix) + ".gadgets.jsonl")
    if gadget_path.exists():
        for line in gadget_path.read_text().splitlines():
            entry = json.loads(line)
            catalog.append(
                GadgetCandidate(
                    start=int(entry["start"], 16),
                    site_address=int(entry["site"], 16),
                    instructions=entry["instructions"],
                    stack_delta=entry["stack_delta"],
                    pc_slot_index=entry["pc_slot_index"],
                )
            )
    return _result_from_json(obj, catalog)


def _equivalence_suite(plain, plain_man, image, manifest, key, *, runs, seeds):
    """Randomized original-vs-transformed call comparisons; returns
    (runs, passed)."""
    rng = random.Random(0xEC0)
    rotated = manifest.has_pass("encrypt_pushes") and any(
        e.get("rotation_capable") for e in manifest.transform_log
    )
    tables = []
    if rotated:
        tables = [
            harden_mod.build_rotated_table(image, manifest, key, seed) for seed in seeds
        ]
    elif manifest.has_pass("obfuscate_returns"):
        tables = [build_table(image, key)]
    else:
        tables = [None]
    passed = 0
    total = 0
    pairs = list(zip(plain_man.functions, manifest.functions))
    if not pairs:
        return 0, 0
    for i in range(runs):
        fn_old, fn_new = pairs[rng.randrange(len(pairs))]
        table = tables[i % len(tables)]
        regs = {r: rng.randrange(1 << 32) for r in range(13)}
        total += 1
        try:
            a = call(plain, entry=fn_old.start, regs=regs)
            b = call(image, table, entry=fn_new.start, regs=regs)
            sp_ok = b.state.sp == b.state.stack_top - machine.CALLER_STACK_BYTES
            if states_equivalent(a.state, b.state) and sp_ok:
                passed += 1
        except MachineFault:
            pass
    return total, passed


def cmd_eval(args) -> int:
    key = _parse_key(args.key)
    plain, plain_man = load(args.plain)
    image, manifest = load(args.image)
    result = _load_attack(args.attack)
    report = evaluate_recovery(result, manifest, image)

    before = [c for c in baseline_gadget_scan(plain) if not c.instructions]
    after = baseline_gadget_scan(image)
    seeds = list(range(args.rotation_seeds))
    runs, passed = _equivalence_suite(
        plain, plain_man, image, manifest, key, runs=args.equivalence_runs, seeds=seeds or [0]
    )

    rotated = manifest.has_pass("encrypt_pushes") and any(
        e.get("rotation_capable") for e in manifest.transform_log
    )
    gadget_check = None
    if result.catalog and not rotated:
        table = build_table(image, key) if manifest.has_pass("obfuscate_returns") else None
        rng = random.Random(0xCA7)
        sample = rng.sample(result.catalog, min(25, len(result.catalog)))
        ok = sum(
            check_gadget(image, table, c.start, c.stack_delta, c.pc_slot_index)
            for c in sample
        )
        gadget_check = {"sampled": len(sample), "passed": ok}

    histogram = None
    if rotated and args.rotation_seeds > 1:
        histogram = harden_mod.position_distribution(image, manifest, key, seeds)

    payload = {
        "config": _echo(args),
        "inputs": {
            "plain_sha256": plain.sha256(),
            "image_sha256": image.sha256(),
        },
        "gadget_terminators": {"before": len(before), "after": len(after)},
        "equivalence": {"runs": runs, "passed": passed},
        "gadget_check": gadget_check,
        "size_overhead_bytes": len(image.data) - len(plain.data),
        "recovery": report.to_json(),
        "position_histogram": histogram,
    }
    out = Path(args.out)
    _dump_json(Path(str(out) + ".eval.json"), payload)
    text_lines = [
        f"gadget terminators: {len(before)} before, {len(after)} after",
        f"equivalence: {passed}/{runs} runs",
        f"size overhead: {payload['size_overhead_bytes']} bytes",
        report.text_table(),
    ]
    text = "\n".join(text_lines)
    Path(str(out) + ".eval.txt").write_text(text + "\n")
    print(text if args.format == "text" else json.dumps(payload, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="retobf",
        description="Return-instruction obfuscation lab: transform, attack, "
        "harden, and evaluate Thumb firmware images.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic corpus")
    p.add_argument("--out", required=True, help="output prefix (.bin/.json)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--functions", type=int, default=200)
    p.add_argument("--leaf-ratio", type=float, default=0.2)
    p.add_argument("--multi-epilogue-prob", type=float, default=0.0)
    p.add_argument("--high-reg-prob", type=float, default=0.15)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("obfuscate", help="seal returns behind trampolines")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--key", help=f"16-bit hex key (default ${KEY_ENV})")
    p.set_defaults(func=cmd_obfuscate)

    p = sub.add_parser("init", help="rebuild the RAM table like the boot pass")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out")
    p.add_argument("--key", help=f"16-bit hex key (default ${KEY_ENV})")
    p.add_argument("--seed", type=int, help="boot seed (rotated tables)")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("attack", help="locate and recover sealed returns "
                       "from image bytes alone")
    p.add_argument("--in", dest="input", required=True, help="image prefix or .bin")
    p.add_argument("--out", required=True)
    p.add_argument("--base", type=_hex, default=image_mod.DEFAULT_BASE,
                   help="load address of the image (hex)")
    p.add_argument("--format", choices=("json", "text"), default="text")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("harden", help="pad, seal, and rotation-enable a corpus")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--key", help=f"16-bit hex key (default ${KEY_ENV})")
    p.add_argument("--kmax", type=int, default=3)
    p.add_argument("--rotate", choices=("on", "off"), default="off")
    p.add_argument("--encrypt-push", dest="encrypt_push", choices=("on", "off"),
                   default="off")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_harden)

    p = sub.add_parser("eval", help="join attack output with ground truth")
    p.add_argument("--plain", required=True, help="pre-transform corpus prefix")
    p.add_argument("--image", required=True, help="transformed image prefix")
    p.add_argument("--attack", required=True, help="attack output prefix")
    p.add_argument("--out", required=True)
    p.add_argument("--key", help=f"16-bit hex key (default ${KEY_ENV})")
    p.add_argument("--equivalence-runs", type=int, default=40)
    p.add_argument("--rotation-seeds", type=int, default=50)
    p.add_argument("--format", choices=("json", "text"), default="text")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ImageError, ObfuscationError, LineageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
