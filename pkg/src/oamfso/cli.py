"""``oamfso`` command line: physics banks, MDL analysis, code checks and BER runs.

Every command that writes a file also writes ``<file>.manifest.json`` with the
resolved configuration, seed, input fingerprints and tool version.

Exit codes: 0 success; 1 runtime or input error; 2 usage error; 3 a result
flag (BER cap hit, rank-deficient realizations) fired without ``--allow-flags``.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import subprocess
import sys
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path


from . import analysis, propagation, simulate, stcode, turbulence
from .fieldgrid import BeamParams, GridSpec, ModeIndex

EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_FLAGGED = 3


def _version() -> str:
    try:
        ver = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        ver = "unknown"
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                              text=True, cwd=Path(__file__).parent, timeout=5).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        desc = ""
    return f"{ver} ({desc})" if desc else ver


def fingerprint(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    version: str = field(default_factory=_version)
    started: str = field(default_factory=lambda: dt.datetime.now(dt.timezone.utc).isoformat())
    finished: str = ""
    flags: list = field(default_factory=list)

    def add_input(self, path):
        self.inputs[str(path)] = fingerprint(path)

    def write(self, out: str | Path):
        self.finished = dt.datetime.now(dt.timezone.utc).isoformat()
        self.outputs.append(str(out))
        Path(f"{out}.manifest.json").write_text(json.dumps(asdict(self), indent=2, default=str) + "\n")


class UsageError(Exception):
    pass


def _positive(kind):
    def conv(text):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
        if not v > 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v
    return conv


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return v


def _charges(text) -> tuple[int, ...]:
    try:
        return tuple(int(c) for c in text.split(",") if c.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _link(args) -> propagation.LinkParams:
    return propagation.LinkParams(
        z_total=args.z, beam=BeamParams(args.w0, args.wavelength), grid=GridSpec(args.n, args.dx),
        placement=args.placement, precision=args.precision,
    )


def cmd_rytov(args) -> int:
    p = turbulence.TurbulenceParams(cn2=args.cn2)
    s = turbulence.rytov_variance(p, args.wavelength, args.z)
    regime = turbulence.classify_regime(s)
    print(f"sigma_R^2 = {s:.6g}  regime: {regime}")
    if regime == "boundary":
        print("note: sigma_R^2 == 1 sits exactly on the weak/strong boundary")
    return 0


def cmd_gen_screens(args) -> int:
    turb = turbulence.TurbulenceParams(cn2=args.cn2)
    stack = turbulence.gen_screen_stack(GridSpec(args.n, args.dx), turb, args.z, args.count,
                                        args.seed, wavelength=args.wavelength, placement=args.placement)
    turbulence.write_screen_bank(args.out, stack, args.seed, turb)
    man = RunManifest("gen-screens", vars_of(args), args.seed)
    man.write(args.out)
    print(f"wrote {stack.count} screens to {args.out}")
    return 0


def cmd_gen_channels(args) -> int:
    if args.count < 1:
        raise UsageError(f"count must be >= 1, got {args.count}")
    link = _link(args)
    turb = turbulence.TurbulenceParams(cn2=args.cn2)
    charges = args.charges or tuple(range(-args.max_charge, args.max_charge + 1))
    modes = tuple(ModeIndex(0, c) for c in charges)
    h = propagation.generate_channels(modes, turb, link, args.count, args.seed,
                                      screens=args.screens, threads=args.threads)
    hdr = propagation.ChannelBankHeader(charges, args.count, args.cn2, args.z, args.seed, args.placement)
    propagation.write_channel_bank(args.out, hdr, h)
    RunManifest("gen-channels", vars_of(args), args.seed).write(args.out)
    print(f"wrote {args.count} x {len(charges)}x{len(charges)} channels to {args.out}")
    return 0


def _ensemble(args, man: RunManifest) -> analysis.ChannelEnsemble:
    man.add_input(args.bank)
    return analysis.ChannelEnsemble.from_bank(args.bank)


def cmd_mdl_map(args) -> int:
    man = RunManifest("mdl-map", vars_of(args), None)
    ens = _ensemble(args, man)
    mean, se = analysis.mdl_map(ens)
    analysis.write_mdl_map_csv(args.out, ens.charges, mean)
    if args.stderr_out:
        analysis.write_mdl_map_csv(args.stderr_out, ens.charges, se)
        man.outputs.append(str(args.stderr_out))
    man.write(args.out)
    print(f"wrote {len(ens.charges)}x{len(ens.charges)} MDL map ({len(ens)} realizations) to {args.out}")
    return 0


def cmd_select_modes(args) -> int:
    man = RunManifest("select-modes", vars_of(args), None)
    ens = _ensemble(args, man)
    if args.candidates:
        ens = ens.restrict(args.candidates)
    sel = analysis.select_modes(ens, args.m)
    record = {"modes": list(sel.modes.charges), "mean_mdl_db": sel.mean_mdl, "stderr_db": sel.stderr,
              "crosstalk": sel.crosstalk, "realizations": sel.ensemble_size, "excluded": sel.excluded,
              "tie_break": sel.tie_break}
    print(f"{sel.modes}  mean MDL {sel.mean_mdl:.4f} dB (+/- {sel.stderr:.4f})")
    if args.out:
        Path(args.out).write_text(json.dumps(record, indent=2) + "\n")
        if sel.excluded:
            man.flags.append(f"rank-deficient realizations excluded: {sel.excluded}")
        man.write(args.out)
    if sel.excluded and not args.allow_flags:
        print(f"flag: {sel.excluded} rank-deficient realizations excluded", file=sys.stderr)
        return EXIT_FLAGGED
    return 0


def cmd_ber(args) -> int:
    kv = simulate.read_kv_file(args.config) if args.config else {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        kv[k.strip()] = v.strip()
    for key in ("code", "bank"):
        if getattr(args, key) is not None:
            kv[key] = getattr(args, key)
    if args.charges is not None:
        kv["charges"] = ",".join(map(str, args.charges))
    if args.snr is not None:
        kv["snr_db"] = args.snr
    if args.node_log is not None:
        kv["node_log"] = args.node_log
    kv["master_seed"] = str(args.seed)
    kv["threads"] = str(args.threads)
    try:
        cfg = simulate.SimConfig.from_mapping(kv)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None
    man = RunManifest("ber", cfg.as_record(), cfg.master_seed)
    if args.config:
        man.add_input(args.config)
    if cfg.bank:
        man.add_input(cfg.bank)
    link = simulate.Link.build(cfg)
    points = simulate.run_sweep(cfg, link=link)
    simulate.write_ber_csv(args.out, points)
    man.config.update(normalization_scale=link.scale, code_energy_scale=link.spec.energy_scale(),
                      realizations=len(link.channels), wall_seconds=[p.wall for p in points])
    flags = [f"cap hit at {p.snr_db:g} dB ({p.errors} errors in {p.bits} bits)" for p in points if p.capped]
    if link.dropped:
        flags.append(f"rank-deficient realizations dropped: {link.dropped}")
    man.flags.extend(flags)
    man.write(args.out)
    for p in points:
        print(f"{p.snr_db:6.2f} dB  BER {p.ber:.3e}  ({p.errors}/{p.bits}){'  capped' if p.capped else ''}")
    if flags and not args.allow_flags:
        for f in flags:
            print(f"flag: {f}", file=sys.stderr)
        return EXIT_FLAGGED
    return 0


def cmd_mindet(args) -> int:
    r = stcode.min_determinant(args.code)
    print(f"{args.code}: min |det dX| = {r.min_abs_det:.12g}  normalized = {r.normalized:.12g}  "
          f"({r.pairs} pairs)")
    return 0


def vars_of(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def _physics_args(p, *, link=True):
    p.add_argument("--cn2", type=_positive(float), default=1e-13)
    p.add_argument("--z", type=_positive(float), default=1000.0, help="path length [m]")
    p.add_argument("--wavelength", type=_positive(float), default=1550e-9)
    p.add_argument("--n", type=int, default=512, help="grid points per side")
    p.add_argument("--dx", type=_positive(float), default=5e-3, help="grid spacing [m]")
    p.add_argument("--placement", choices=turbulence.PLACEMENTS, default="end")
    if link:
        p.add_argument("--w0", type=_positive(float), default=0.016)
        p.add_argument("--precision", choices=("double", "single"), default="double")


def build_parser() -> argparse.ArgumentParser:
    def common(parser, default):
        kw = {} if default else {"default": argparse.SUPPRESS}
        parser.add_argument("--seed", type=_nonneg_int, help="master seed for all randomness",
                            **(kw or {"default": 0}))
        parser.add_argument("--threads", type=_positive(int), **(kw or {"default": 1}))
        parser.add_argument("--allow-flags", action="store_true",
                            help="exit 0 even when result flags fire", **kw)

    ap = argparse.ArgumentParser(prog="oamfso", description=__doc__.splitlines()[0])
    common(ap, True)
    shared = argparse.ArgumentParser(add_help=False)
    common(shared, False)
    sub = ap.add_subparsers(dest="command", required=True)
    _add = sub.add_parser

    def add_parser(name, **kw):
        return _add(name, parents=[shared], **kw)

    sub.add_parser = add_parser

    p = sub.add_parser("rytov", help="Rytov variance and weak/strong label")
    p.add_argument("--cn2", type=_positive(float), default=1e-14)
    p.add_argument("--wavelength", type=_positive(float), default=1550e-9)
    p.add_argument("--z", type=_positive(float), default=1000.0)
    p.set_defaults(func=cmd_rytov)

    p = sub.add_parser("gen-screens", help="write one phase-screen stack")
    _physics_args(p, link=False)
    p.add_argument("--count", type=_positive(int), default=20)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_screens)

    p = sub.add_parser("gen-channels", help="write a channel-matrix bank")
    _physics_args(p)
    p.add_argument("--count", type=int, default=1000, help="realizations")
    p.add_argument("--screens", type=_positive(int), default=20)
    p.add_argument("--max-charge", type=_nonneg_int, default=10)
    p.add_argument("--charges", type=_charges, help="explicit comma-separated charges")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_channels)

    p = sub.add_parser("mdl-map", help="pairwise average-MDL CSV")
    p.add_argument("bank")
    p.add_argument("--out", required=True)
    p.add_argument("--stderr-out")
    p.set_defaults(func=cmd_mdl_map)

    p = sub.add_parser("select-modes", help="MDL-minimizing mode subset")
    p.add_argument("bank")
    p.add_argument("-m", type=_positive(int), required=True)
    p.add_argument("--candidates", type=_charges)
    p.add_argument("--out")
    p.set_defaults(func=cmd_select_modes)

    p = sub.add_parser("ber", help="Monte Carlo BER sweep")
    p.add_argument("--config", help="key=value file with SimConfig keys")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--code", choices=stcode.CODE_NAMES)
    p.add_argument("--bank")
    p.add_argument("--charges", type=_charges)
    p.add_argument("--snr", help="comma-separated SNR grid [dB]")
    p.add_argument("--node-log", help="debug CSV of per-codeword decoder node counts")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ber)

    p = sub.add_parser("mindet", help="brute-force minimum determinant of a 2x2 code")
    p.add_argument("code", choices=("golden", "silver"))
    p.set_defaults(func=cmd_mindet)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        ap.error(str(e))
    except (ValueError, KeyError, OSError) as e:
        print(f"oamfso {args.command}: error: {e}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
