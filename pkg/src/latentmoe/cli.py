"""Command-line driver: gen, transform, verify, count, forward, bench.

Exit codes: 0 success, 1 usage, 2 I/O or format, 3 numerical failure,
4 verification failure. Every command writes a JSON run manifest with the
options, seed, sha256 digests of the files read and written, and a summary.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import accounting, container, synth
from .errors import ArgumentError, FormatError, LatentMoeError, VerificationError
from .moe import MoeConfig, MoeLayer
from .molae import MolaeConfig, MolaeLayer, format_op_mask, parse_op_mask
from .transform import TransformOptions, collect_activations, transform_layer, verify_equivalence

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERICAL, EXIT_VERIFY = 0, 1, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for I/O errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive(s: str) -> int:
    try:
        v = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {s!r}")
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _rank(s: str):
    return None if s == "full" else _positive(s)


def _ops(s: str) -> frozenset:
    try:
        return parse_op_mask(s)
    except ArgumentError as exc:
        raise argparse.ArgumentTypeError(str(exc))


class Run:
    """Collects what a command read and wrote for its manifest."""

    def __init__(self, args):
        self.args = args
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.summary: dict = {}

    def read_layer(self, path):
        data = _read_bytes(path)
        self.inputs[str(path)] = hashlib.sha256(data).hexdigest()
        return container.loads(data)

    def read_bytes(self, path) -> bytes:
        data = _read_bytes(path)
        self.inputs[str(path)] = hashlib.sha256(data).hexdigest()
        return data

    def write_bytes(self, path, data: bytes) -> None:
        try:
            container.atomic_write(path, data)
        except OSError as exc:
            raise FormatError(f"cannot write {path}: {exc.strerror}") from exc
        self.outputs[str(path)] = hashlib.sha256(data).hexdigest()

    def write_json(self, path, obj) -> None:
        self.write_bytes(path, _json_bytes(obj))


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror}") from exc


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n").encode("utf-8")


_FLAG_NAMES = {"inp": "in", "lam": "lambda"}


def _options(args) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in ("func", "manifest", "command"):
            continue
        if isinstance(v, frozenset):
            v = format_op_mask(v)
        out[_FLAG_NAMES.get(k, k)] = v
    return out


# --- commands ----------------------------------------------------------------


def cmd_gen(args, run: Run) -> int:
    if args.kind == "moe":
        cfg = MoeConfig(args.n, args.m, args.experts, args.topk, args.activation)
    else:
        cfg = MolaeConfig(
            args.n, args.m, args.experts, args.topk, args.activation, group_size=args.group_size, op_mask=args.ops
        )
    layer = synth.generate(args.kind, cfg, args.seed)
    run.write_bytes(args.out, container.dumps(layer, args.dtype))
    run.summary = {
        "kind": args.kind,
        "layer_kind": layer.kind,
        "census": accounting.census(layer),
        "dtype": args.dtype,
    }
    return EXIT_OK


def cmd_transform(args, run: Run) -> int:
    src = run.read_layer(args.inp)
    if not isinstance(src, MoeLayer):
        raise ArgumentError(f"{args.inp} holds a {src.kind} layer; transform needs a moe layer")
    mode = args.mode.replace("-", "_")
    opts = TransformOptions(
        latent_dim=args.latent_dim,
        target_rank=args.rank,
        rank_ratio=args.rank_ratio,
        group_size=args.group_size,
        op_mask=args.ops,
        mode=mode,
        lam=args.lam,
        probes=args.probes,
        probe_seed=args.seed,
        max_workers=args.threads,
    )
    acts = None
    if mode == "activation_aware":
        x = np.random.default_rng(args.seed).standard_normal((args.calib_samples, src.config.n))
        acts = collect_activations(src, x)
    out, report = transform_layer(src, opts, acts)
    run.write_bytes(args.out, container.dumps(out, args.dtype))
    rep = report.to_dict()
    rep["calibration"] = None if acts is None else {"samples": args.calib_samples, "seed": args.seed, "per_expert": acts.counts}
    if args.report:
        run.write_json(args.report, rep)
    run.summary = {
        "total_residual": report.total_residual,
        "latent_dim": report.latent_dim,
        "census": accounting.census(out),
        "forward": rep["forward"],
        "regularized": any(g.regularized for g in report.groups),
    }
    return EXIT_OK


def cmd_verify(args, run: Run) -> int:
    a = run.read_layer(args.a)
    b = run.read_layer(args.b)
    stats = verify_equivalence(a, b, args.probes, args.seed)
    passed = bool(stats.max_rel_dev <= args.max_rel_dev)
    run.summary = dict(stats.to_dict(), threshold=args.max_rel_dev, passed=passed)
    print(json.dumps(run.summary, sort_keys=True))
    if not passed:
        raise VerificationError(f"max relative deviation {stats.max_rel_dev:.3e} exceeds {args.max_rel_dev:.3e}")
    return EXIT_OK


def cmd_count(args, run: Run) -> int:
    census = None
    if args.inp:
        layer = run.read_layer(args.inp)
        c = layer.config
        if isinstance(layer, MolaeLayer):
            spec = accounting.ArchSpec.from_layer(layer)
        else:
            k = args.group_size or 1
            spec = accounting.ArchSpec(c.n, c.m, c.num_experts, k, args.ops, c.top_k)
        census = accounting.census(layer)
        if isinstance(layer, MolaeLayer):
            expected = accounting.cost_report(spec).molae_census_params
        else:
            expected = accounting.moe_param_count(spec)
        if census != expected:
            raise ArgumentError(f"census {census} disagrees with closed form {expected}")
    else:
        missing = [f for f in ("n", "m", "experts", "group_size") if getattr(args, f) is None]
        if missing:
            raise ArgumentError("count needs --in or all of --n --m --experts --group-size (missing "
                                + ", ".join("--" + f.replace("_", "-") for f in missing) + ")")
        spec = accounting.ArchSpec(args.n, args.m, args.experts, args.group_size, args.ops, args.topk)
    rep = accounting.cost_report(spec)
    d = rep.to_dict()
    d["layer_census"] = census
    if args.report:
        run.write_json(args.report, d)
    print(json.dumps(d, sort_keys=True) if args.json else rep.to_text())
    run.summary = {
        "moe_params": rep.moe_params,
        "molae_params": rep.molae_params,
        "moe_flops": rep.moe_flops,
        "molae_flops": rep.molae_flops,
        "layer_census": census,
        "group_count_mismatch": rep.group_count_mismatch,
    }
    return EXIT_OK


def cmd_forward(args, run: Run) -> int:
    layer = run.read_layer(args.inp)
    raw = run.read_bytes(args.input)
    n = layer.config.n
    if len(raw) == 0 or len(raw) % (4 * n):
        raise FormatError(f"{args.input}: {len(raw)} bytes is not a whole number of float32 rows of width {n}", len(raw))
    x = np.frombuffer(raw, dtype="<f4").reshape(-1, n).astype(np.float64)
    if not np.all(np.isfinite(x)):
        raise FormatError(f"{args.input}: input contains NaN or Inf")
    y = layer.forward(x)
    run.write_bytes(args.out, np.ascontiguousarray(y, dtype="<f4").tobytes())
    run.summary = {"rows": int(x.shape[0]), "n": n}
    return EXIT_OK


def cmd_bench(args, run: Run) -> int:
    layer = run.read_layer(args.inp)
    x = np.random.default_rng(args.seed).standard_normal((args.probes, layer.config.n))
    layer.forward(x)  # warm-up
    times = []
    for _ in range(args.repeats):
        t0 = time.perf_counter()
        layer.forward(x)
        times.append(time.perf_counter() - t0)
    spec = accounting.ArchSpec.from_layer(layer)
    if isinstance(layer, MolaeLayer):
        flops, active = accounting.molae_flops(spec), accounting.molae_active_flops(spec)
    else:
        flops, active = accounting.moe_flops(spec), accounting.moe_active_flops(spec)
    run.summary = {
        "kind": layer.kind,
        "probes": args.probes,
        "repeats": args.repeats,
        "seconds_per_forward_median": float(np.median(times)),
        "seconds_per_token": float(np.median(times)) / args.probes,
        "analytic_flops_all_experts": flops,
        "analytic_flops_active_experts": active,
    }
    print(json.dumps(run.summary, sort_keys=True))
    return EXIT_OK


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="latentmoe", description="Generate, convert, verify and cost MoE / latent-expert layers.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--manifest", help="run manifest path (default depends on the command)")

    g = sub.add_parser("gen", help="write a seeded synthetic layer")
    g.add_argument("--kind", choices=synth.KINDS, required=True)
    g.add_argument("--n", type=_positive, required=True)
    g.add_argument("--m", type=_positive, required=True)
    g.add_argument("--experts", type=_positive, required=True)
    g.add_argument("--topk", type=_positive, default=2)
    g.add_argument("--group-size", type=_positive, default=1)
    g.add_argument("--ops", type=_ops, default=parse_op_mask("all"), help="latent operators for --kind molae")
    g.add_argument("--activation", choices=("silu", "relu", "identity"), default="silu")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    g.add_argument("--out", required=True)
    common(g)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("transform", help="convert a MoE layer to latent experts")
    t.add_argument("--in", dest="inp", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--latent-dim", type=_positive)
    rk = t.add_mutually_exclusive_group()
    rk.add_argument("--rank", type=_rank, default=None, help="per-expert rank R, or 'full' (default)")
    rk.add_argument("--rank-ratio", type=float)
    t.add_argument("--group-size", type=_positive, default=1)
    t.add_argument("--ops", type=_ops, default=parse_op_mask("all"))
    t.add_argument("--mode", choices=("plain", "activation-aware"), default="plain")
    t.add_argument("--calib-samples", type=_positive, default=256)
    t.add_argument("--lambda", dest="lam", type=float, default=None)
    t.add_argument("--report")
    t.add_argument("--seed", type=int, default=0, help="seeds calibration and check probes")
    t.add_argument("--probes", type=int, default=64)
    t.add_argument("--threads", type=_positive, default=1)
    t.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    common(t)
    t.set_defaults(func=cmd_transform)

    v = sub.add_parser("verify", help="compare two layers' forward outputs")
    v.add_argument("--a", required=True)
    v.add_argument("--b", required=True)
    v.add_argument("--probes", type=_positive, default=64)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--max-rel-dev", type=float, default=1e-6)
    common(v)
    v.set_defaults(func=cmd_verify)

    c = sub.add_parser("count", help="parameter and FLOP report")
    c.add_argument("--in", dest="inp")
    c.add_argument("--n", type=_positive)
    c.add_argument("--m", type=_positive)
    c.add_argument("--experts", type=_positive)
    c.add_argument("--group-size", type=_positive)
    c.add_argument("--topk", type=_positive, default=1)
    c.add_argument("--ops", type=_ops, default=parse_op_mask("all"))
    c.add_argument("--report")
    c.add_argument("--json", action="store_true", help="print JSON instead of the text table")
    common(c)
    c.set_defaults(func=cmd_count)

    f = sub.add_parser("forward", help="run a layer on raw float32 rows")
    f.add_argument("--in", dest="inp", required=True)
    f.add_argument("--input", required=True)
    f.add_argument("--out", required=True)
    common(f)
    f.set_defaults(func=cmd_forward)

    b = sub.add_parser("bench", help="time the forward pass")
    b.add_argument("--in", dest="inp", required=True)
    b.add_argument("--probes", type=_positive, default=64)
    b.add_argument("--repeats", type=_positive, default=5)
    b.add_argument("--seed", type=int, default=0)
    common(b)
    b.set_defaults(func=cmd_bench)
    return p


def default_manifest(args) -> str:
    if args.manifest:
        return args.manifest
    if getattr(args, "out", None):
        return f"{args.out}.manifest.json"
    if getattr(args, "report", None):
        return f"{args.report}.manifest.json"
    if args.command == "verify":
        return f"{args.b}.verify.manifest.json"
    if getattr(args, "inp", None):
        return f"{args.inp}.{args.command}.manifest.json"
    return f"{args.command}.manifest.json"


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    run = Run(args)
    code, error = EXIT_OK, None
    try:
        code = args.func(args, run)
    except LatentMoeError as exc:
        code, error = exc.exit_code, str(exc)
    except (ValueError, TypeError) as exc:
        code, error = EXIT_USAGE, str(exc)
    except MemoryError:
        code, error = EXIT_NUMERICAL, "out of memory"
    if error:
        print(f"latentmoe {args.command}: error: {error}", file=sys.stderr)
    manifest = {
        "command": args.command,
        "options": _options(args),
        "seed": getattr(args, "seed", None),
        "inputs": run.inputs,
        "outputs": run.outputs,
        "summary": run.summary,
        "exit_code": code,
        "error": error,
    }
    try:
        container.atomic_write(default_manifest(args), _json_bytes(manifest))
    except OSError as exc:
        print(f"latentmoe {args.command}: error: cannot write manifest: {exc.strerror}", file=sys.stderr)
        if code == EXIT_OK:
            code = EXIT_IO
    return code


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
