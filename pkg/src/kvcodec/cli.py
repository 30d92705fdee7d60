"""Command-line front end.

Every subcommand is a thin wrapper over library calls. Options can also come
from a ``key=value`` config file (``--config`` or ``$KVCODEC_CONFIG``); keys
are option names with dashes or underscores. Precedence: flag > file > default.

Exit codes: 0 ok, 2 usage, 3 invalid input, 4 corrupt data, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .allocator import DEFAULT_GROUP_SIZES, DEFAULT_TYPES, DpConfig
from .bench import cr_sweep, format_table, plan_table, procrustes_pairs, sweep_spec, sweep_table
from .calib import SamplingSpec, build_calibration_matrix, calibrate, plan_stream, reconstruction_error_curve
from .codec import (
    CacheShape,
    CompressionPolicy,
    KvCache,
    compress,
    compression_stats,
    decompress,
    kv_cache_bytes,
    stream_rows,
)
from .container import (
    parse_artifact,
    parse_cache,
    parse_plan,
    parse_tensor,
    read_tensor,
    serialize_plan,
    sniff,
    write_tensor,
)
from .entropy import CodecKind, LosslessCodec
from .errors import CorruptPayload, InvalidInput, KvCodecError, NumericalFailure
from .quant import ElementType
from .rope import HALF_SPLIT, INTERLEAVED, RopeConfig
from .synth import SynthSpec, generate

CONFIG_ENV = "KVCODEC_CONFIG"

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_CORRUPT = 4
EXIT_NUMERIC = 5


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config files


def read_config(path) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}:{n}: expected key=value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _apply_config(sub: argparse.ArgumentParser, values: dict[str, str]) -> None:
    known = {a.dest: a for a in sub._actions}
    for key, value in values.items():
        action = known.get(key)
        if action is None:
            continue  # one file may serve several subcommands
        if action.nargs in ("+", "*"):
            sub.set_defaults(**{key: value.split()})
        elif isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            sub.set_defaults(**{key: value.lower() in ("1", "true", "yes", "on")})
        else:
            sub.set_defaults(**{key: value})  # argparse applies ``type`` to string defaults


# ---------------------------------------------------------------- helpers


def _rope(base: float, pairing: str, head_dim: int) -> RopeConfig | None:
    return RopeConfig(head_dim, base=base, pairing=pairing) if base > 0 else None


def _load_cache(path, rope_base: float, pairing: str, start_position: int = 0) -> KvCache:
    tensor = read_tensor(path)
    if tensor.ndim != 5:
        raise InvalidInput(f"{path}: expected a (2, l, h, t, d) cache tensor, got shape {tensor.shape}")
    return KvCache.from_tensor(tensor, _rope(rope_base, pairing, tensor.shape[-1]), start_position)


def _load_artifact(path):
    return parse_artifact(Path(path).read_bytes())


def _load_plan(path):
    return parse_plan(Path(path).read_bytes())


def _parse_types(text: str) -> tuple[ElementType, ...]:
    return tuple(ElementType.parse(t) for t in text.split(",") if t)


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t)


def _emit(args, headers, rows) -> None:
    sys.stdout.write(format_table(headers, rows, args.format))


def _calibration_rows(artifact, path, sinks: int) -> np.ndarray:
    """Rows for planning: a 2-D matrix as is, or every non-sink token of a cache."""
    x = read_tensor(path)
    if x.ndim == 2:
        return x.astype(np.float64)
    if x.ndim != 5:
        raise InvalidInput(f"{path}: calibration data must be 2-D rows or a 5-D cache tensor")
    cache = KvCache.from_tensor(x, artifact.rope)
    layers = artifact.layer_count or cache.shape.layers
    sub = KvCache(
        cache.keys[artifact.layer_start : artifact.layer_start + layers],
        cache.values[artifact.layer_start : artifact.layer_start + layers],
        cache.rope,
    )
    return stream_rows(sub, artifact.stream, sinks, sub.shape.tokens)


# ---------------------------------------------------------------- subcommands


def cmd_calibrate(args) -> int:
    caches = [_load_cache(p, args.rope_base, args.rope_pairing) for p in args.caches]
    sampling = SamplingSpec(args.samples, args.sinks, args.seed, args.layer_concat_width)
    art = calibrate(caches, args.stream, args.rank, sampling, args.method, args.power_iterations, args.layer_group)
    Path(args.out).write_bytes(art.to_bytes())
    rows = build_calibration_matrix(caches, sampling, args.stream, args.layer_group)
    report = reconstruction_error_curve(art.model, None, rows)
    print(f"artifact {args.out} stream {art.stream} features {art.feature_count} rank {art.rank} "
          f"fingerprint {art.fingerprint:016x}")
    sys.stdout.write(report.to_csv() if args.format == "csv" else report.to_text())
    return EXIT_OK


def cmd_plan(args) -> int:
    art = _load_artifact(args.artifact)
    rows = _calibration_rows(art, args.calib, args.sinks)
    config = DpConfig(group_sizes=_parse_ints(args.group_sizes), types=_parse_types(args.types))
    plan = plan_stream(art, rows, args.target_cr, args.mode, config)
    if args.out:
        Path(args.out).write_bytes(serialize_plan(plan))
    print(f"bits_per_token {plan.bits_per_token} budget_bits {plan.budget_bits} "
          f"expected_error {plan.expected_error:.6e}")
    _emit(args, *plan_table(plan))
    return EXIT_OK


def cmd_compress(args) -> int:
    ka, va = _load_artifact(args.key_artifact), _load_artifact(args.value_artifact)
    kp, vp = _load_plan(args.key_plan), _load_plan(args.value_plan)
    tensor = read_tensor(args.input)
    if tensor.ndim != 5:
        raise InvalidInput(f"{args.input}: expected a (2, l, h, t, d) cache tensor")
    # raw tensors carry no RoPE metadata; the key artifact records what calibration used
    rope = _rope(args.rope_base, args.rope_pairing, tensor.shape[-1]) if args.rope_base is not None else ka.rope
    cache = KvCache.from_tensor(tensor, rope, args.start_position)
    policy = CompressionPolicy(args.sinks, args.window, LosslessCodec(CodecKind.parse(args.codec), args.level))
    c = compress(cache, ka, va, policy, kp, vp, strict=args.strict)
    data = c.to_bytes()
    Path(args.out).write_bytes(data)
    st = compression_stats(c)
    print(f"wrote {args.out} ({len(data)} bytes)")
    _emit(args, ["metric", "value"], [
        ("compression_ratio", st.compression_ratio),
        ("compression_ratio_with_header", st.compression_ratio_with_header),
        ("quantization_ratio", st.quantization_ratio),
        ("entropy_gain", st.entropy_gain),
        ("header_bytes", st.header_bytes),
    ])
    return EXIT_OK


def cmd_decompress(args) -> int:
    c = parse_cache(Path(args.input).read_bytes())
    cache = decompress(c, _load_artifact(args.key_artifact), _load_artifact(args.value_artifact))
    write_tensor(args.out, cache.to_tensor())
    print(f"wrote {args.out} shape {cache.to_tensor().shape} dtype {cache.dtype}")
    return EXIT_OK


def _describe(buf) -> list[tuple[str, object]]:
    kind = sniff(buf)
    if kind == "artifact":
        a = parse_artifact(buf)
        return [("format", "artifact"), ("stream", a.stream), ("features", a.feature_count), ("rank", a.rank),
                ("samples", a.sample_count), ("seed", a.seed), ("layers", f"{a.layer_start}+{a.layer_count}"),
                ("rope", a.rope), ("fingerprint", f"{a.fingerprint:016x}")]
    if kind == "plan":
        p = parse_plan(buf)
        return [("format", "plan"), ("components", p.components), ("budget_bits", p.budget_bits),
                ("bits_per_token", p.bits_per_token), ("groups", len(p.groups)),
                ("expected_error", p.expected_error), ("artifact_fingerprint", f"{p.artifact_fingerprint:016x}")]
    if kind == "tensor":
        t = parse_tensor(buf)
        return [("format", "tensor"), ("shape", "x".join(map(str, t.shape))), ("dtype", t.dtype)]
    if kind == "cache":
        c = parse_cache(buf)
        st = compression_stats(c)
        s, e = c.bounds
        sh = c.shape
        return [("format", "cache"), ("shape", f"l={sh.layers} h={sh.kv_heads} d={sh.head_dim} t={sh.tokens}"),
                ("dtype", c.dtype), ("codec", c.lossless.kind.name.lower()), ("sinks", s),
                ("middle", f"{s}:{e}"), ("passthrough", c.passthrough), ("rope", c.rope),
                ("key_fingerprint", f"{c.key_fingerprint:016x}"),
                ("value_fingerprint", f"{c.value_fingerprint:016x}"),
                ("key_payload_bytes", len(c.key_payload)), ("value_payload_bytes", len(c.value_payload)),
                ("baseline_bytes", kv_cache_bytes(sh) if c.dtype == np.float16 else None),
                ("compression_ratio", st.compression_ratio),
                ("compression_ratio_with_header", st.compression_ratio_with_header)]
    raise CorruptPayload(f"unrecognized magic {bytes(buf[:4])!r}")


def cmd_inspect(args) -> int:
    rows = _describe(Path(args.input).read_bytes())
    _emit(args, ["field", "value"], rows + [("checksums", "ok")])
    return EXIT_OK


def cmd_synth(args) -> int:
    shape = CacheShape(args.layers, args.heads, args.head_dim, args.tokens)
    spec = SynthSpec(shape, args.latent_rank, args.noise_sigma, args.sink_scale, not args.independent_heads,
                     _rope(args.rope_base, args.rope_pairing, args.head_dim), args.seed, args.start_position)
    cache = generate(spec, np.dtype(args.dtype))
    write_tensor(args.out, cache.to_tensor())
    print(f"wrote {args.out} shape {cache.to_tensor().shape} dtype {cache.dtype}")
    return EXIT_OK


def cmd_procrustes(args) -> int:
    cache = _load_cache(args.cache, args.rope_base, args.rope_pairing)
    pairs = None
    if args.pairs != "all":
        try:
            pairs = [tuple(int(v) for v in p.split(",")) for p in args.pairs.split(";")]
        except ValueError:
            raise UsageError(f"--pairs expects 'all' or 'i,j[;i,j...]', got {args.pairs!r}") from None
        n = cache.shape.layers * cache.shape.kv_heads
        if any(len(p) != 2 or not all(0 <= v < n for v in p) for p in pairs):
            raise InvalidInput(f"head pairs must be i,j with indices in [0, {n})")
    rows = procrustes_pairs(cache, args.stream, pairs)
    _emit(args, ["head_i", "head_j", "cosine_before", "cosine_after"], rows)
    return EXIT_OK


def _roundtrip_suite(args) -> list[tuple]:
    spec = SynthSpec(CacheShape(2, 2, 32, 512), 24, 0.02, 4.0, rope=RopeConfig(32), seed=args.seed)
    cache = generate(spec)
    sampling = SamplingSpec(cache.shape.tokens - args.sinks, args.sinks, args.seed)
    rows = []
    for kind in (CodecKind.IDENTITY, CodecKind.DEFLATE):
        arts, plans = [], []
        for stream in ("key", "value"):
            art = calibrate([cache], stream, 64, sampling)
            x = build_calibration_matrix([cache], sampling, stream)
            arts.append(art)
            plans.append(plan_stream(art, x, args.target_cr))
        policy = CompressionPolicy(args.sinks, args.window, LosslessCodec(kind))
        c = compress(cache, arts[0], arts[1], policy, plans[0], plans[1])
        back = decompress(parse_cache(c.to_bytes()), *arts)
        s, e = c.bounds
        exact = all(
            np.array_equal(getattr(back, n)[:, :, sl], getattr(cache, n)[:, :, sl])
            for n in ("keys", "values") for sl in (slice(0, s), slice(e, None))
        )
        a = cache.to_tensor()[:, :, :, s:e].astype(np.float64)
        b = back.to_tensor()[:, :, :, s:e].astype(np.float64)
        err = float(np.linalg.norm(a - b) / np.linalg.norm(a))
        rows.append((kind.name.lower(), compression_stats(c).compression_ratio, err, exact))
    return rows


def cmd_bench(args) -> int:
    t0 = time.perf_counter()
    if args.suite == "cr-sweep":
        headers, rows = sweep_table(cr_sweep(generate(sweep_spec(args.seed)), seed=args.seed))
    else:
        headers = ["codec", "compression_ratio", "middle_relative_error", "sinks_window_exact"]
        rows = _roundtrip_suite(args)
    _emit(args, headers, rows)
    if args.verbose:
        print(f"elapsed {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_rope(p, default: float | None = 10000.0):
    p.add_argument("--rope-base", type=float, default=default,
                   help="RoPE base; 0 means the keys carry no RoPE")
    p.add_argument("--rope-pairing", choices=(INTERLEAVED, HALF_SPLIT), default=INTERLEAVED)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"key=value option file (default ${CONFIG_ENV})")
    common.add_argument("--format", choices=("text", "csv"), default="text")
    common.add_argument("--verbose", action="store_true", help="print the resolved options to stderr")

    parser = argparse.ArgumentParser(prog="kvcodec", description="Transform coding for KV caches.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("calibrate", parents=[common], help="fit a PCA artifact for one stream")
    p.add_argument("--caches", nargs="+", required=True)
    p.add_argument("--stream", choices=("key", "value"), required=True)
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sinks", type=int, default=4, help="leading positions excluded from sampling")
    p.add_argument("--method", choices=("exact", "randomized"), default="exact")
    p.add_argument("--power-iterations", type=int, default=8)
    p.add_argument("--layer-concat-width", type=int, default=None)
    p.add_argument("--layer-group", type=int, default=0)
    _add_rope(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = subs.add_parser("plan", parents=[common], help="allocate bits over an artifact's components")
    p.add_argument("--artifact", required=True)
    p.add_argument("--calib", required=True, help="2-D row matrix or cache tensor")
    p.add_argument("--target-cr", type=float, required=True)
    p.add_argument("--mode", choices=("dp", "pca-only"), default="dp")
    p.add_argument("--types", default=",".join(t.label for t in DEFAULT_TYPES))
    p.add_argument("--group-sizes", default=",".join(map(str, DEFAULT_GROUP_SIZES)))
    p.add_argument("--sinks", type=int, default=4)
    p.add_argument("--out")
    p.set_defaults(func=cmd_plan)

    p = subs.add_parser("compress", parents=[common], help="compress a cache tensor")
    p.add_argument("--key-artifact", required=True)
    p.add_argument("--value-artifact", required=True)
    p.add_argument("--key-plan", required=True)
    p.add_argument("--value-plan", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--sinks", type=int, default=4)
    p.add_argument("--window", type=int, default=128)
    p.add_argument("--codec", choices=("deflate", "identity"), default="deflate")
    p.add_argument("--level", type=int, default=6)
    p.add_argument("--start-position", type=int, default=0)
    p.add_argument("--strict", action="store_true", help="fail instead of storing a cache with no middle raw")
    _add_rope(p, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compress)

    p = subs.add_parser("decompress", parents=[common], help="restore a cache tensor")
    p.add_argument("--input", required=True)
    p.add_argument("--key-artifact", required=True)
    p.add_argument("--value-artifact", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decompress)

    p = subs.add_parser("inspect", parents=[common], help="print metadata and verify checksums")
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_inspect)

    p = subs.add_parser("synth", parents=[common], help="generate a synthetic cache tensor")
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--head-dim", type=int, default=64)
    p.add_argument("--tokens", type=int, default=2048)
    p.add_argument("--latent-rank", type=int, default=96)
    p.add_argument("--noise-sigma", type=float, default=0.05)
    p.add_argument("--sink-scale", type=float, default=1.0)
    p.add_argument("--independent-heads", action="store_true", help="no planted cross-head rotations")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--start-position", type=int, default=0)
    p.add_argument("--dtype", choices=("float16", "float32", "float64"), default="float16")
    _add_rope(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = subs.add_parser("procrustes", parents=[common], help="cross-head cosine before/after alignment")
    p.add_argument("--cache", required=True)
    p.add_argument("--stream", choices=("key", "value"), default="key")
    p.add_argument("--pairs", default="all", help="'all' or 'i,j[;i,j...]' over flattened (layer, head)")
    _add_rope(p)
    p.set_defaults(func=cmd_procrustes)

    p = subs.add_parser("bench", parents=[common], help="built-in experiment tables")
    p.add_argument("--suite", choices=("roundtrip", "cr-sweep"), default="roundtrip")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--target-cr", type=float, default=8.0)
    p.add_argument("--sinks", type=int, default=4)
    p.add_argument("--window", type=int, default=128)
    p.set_defaults(func=cmd_bench)

    return parser


def parse_args(argv=None, environ=None) -> argparse.Namespace:
    environ = os.environ if environ is None else environ
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    first = parser.parse_args(argv)
    config_path = first.config or environ.get(CONFIG_ENV)
    if not config_path:
        return first
    values = read_config(config_path)
    sub = parser._subparsers._group_actions[0].choices[first.command]
    _apply_config(sub, values)
    args = parser.parse_args(argv)
    args.config = config_path
    return args


def run(argv=None, environ=None) -> int:
    try:
        args = parse_args(argv, environ)
    except SystemExit as exc:  # argparse: --help, --version or bad usage
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except UsageError as exc:
        print(f"kvcodec: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"kvcodec: cannot read config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.verbose:
        for key, value in sorted(vars(args).items()):
            if key != "func":
                print(f"# {key} = {value}", file=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"kvcodec: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CorruptPayload as exc:
        print(f"kvcodec: corrupt data: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except InvalidInput as exc:
        print(f"kvcodec: invalid input: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalFailure as exc:
        print(f"kvcodec: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"kvcodec: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except KvCodecError as exc:
        print(f"kvcodec: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
