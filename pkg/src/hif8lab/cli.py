"""Command-line entry points.

Commands:

* ``run``          - one quantized experiment plus its matched baseline
* ``matrix``       - replay a directory of presets (or the built-in six)
* ``replay-trace`` - push a recorded amax trace through scaling strategies
* ``grid-dump``    - list the representable grid with tier annotations
* ``layout-dump``  - show which blocks/layers a layout quantizes

Exit codes: 0 success, 2 configuration error, 3 parse error, 4 runtime
error.  All file outputs are written atomically, and identical inputs
produce byte-identical outputs.  The environment variable
``HIF8LAB_SEED`` overrides the configured seed for determinism checks.
"""

import argparse
import json
import math
import os
import sys

from . import harness
from .codec import CodecParams, representable_grid, tier_of
from .errors import ConfigError, Hif8Error, ParseError
from .layout import ArchSpec, REFERENCE_ARCH, build_layout, layout_to_json
from .scaling import (
    Current,
    ScaleState,
    algo_name,
    compute_scale,
    group_trace,
    parse_algo,
    read_amax_trace,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARSE = 3
EXIT_RUNTIME = 4

SEED_ENV_VAR = "HIF8LAB_SEED"


def _load_config(path: str) -> harness.QuantConfig:
    try:
        with open(path) as f:
            raw = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ParseError(f"{path}: config must be a flat JSON object")
    config = harness.QuantConfig.from_flat_dict(raw)
    return _apply_seed_override(config)


def _apply_seed_override(config: harness.QuantConfig) -> harness.QuantConfig:
    override = os.environ.get(SEED_ENV_VAR)
    if override is not None:
        try:
            config.seed = int(override)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {override!r}") from exc
    return config


def cmd_run(args) -> int:
    config = _load_config(args.config)
    baseline = harness.baseline_train(config)
    run = harness.two_phase_train(config)
    harness.write_run_outputs(run, baseline, args.out)
    print(f"{run.name}: final_loss={run.final_loss!r} "
          f"ape={harness.ape(run.losses, baseline.losses)!r}% "
          f"saturations={run.total_saturations}")
    print(f"outputs written to {args.out}")
    return EXIT_OK


def cmd_matrix(args) -> int:
    if args.presets:
        presets = []
        for name in sorted(os.listdir(args.presets)):
            if name.endswith(".json"):
                presets.append(_load_config(os.path.join(args.presets, name)))
        if not presets:
            raise ConfigError(f"no *.json presets found in {args.presets}")
    else:
        presets = [_apply_seed_override(p) for p in harness.paper_presets(total_steps=args.steps)]
    rows, _ = harness.run_matrix(presets, out_dir=args.out)
    for row in rows:
        print(f"{row['name']}: status={row['status']} "
              f"ape={row['ape_overall_pct']} saturations={row['saturation_events']}")
    print(f"matrix written to {os.path.join(args.out, 'matrix.csv')}")
    return EXIT_OK


def cmd_replay_trace(args) -> int:
    rows = read_amax_trace(args.trace)
    series = group_trace(rows)
    if not series:
        raise ParseError(f"{args.trace}: trace contains no observations")
    for key, obs in series.items():
        if len(obs) < 2:
            raise ParseError(
                f"{args.trace}: series {key} has {len(obs)} row(s); need at least 2"
            )
    algos = []
    for name in args.algos.split(","):
        algos.append(parse_algo(name, window=args.window, history_len=args.history))

    out_lines = ["algo,layer_id,role,steps,saturated_steps,mean_conservatism"]
    for algo in algos:
        for (layer_id, role), obs in sorted(series.items()):
            state = ScaleState(algo, capacity=max(args.history, 1))
            saturated = 0
            ratios = []
            evaluated = 0
            for row in obs:
                if isinstance(algo, Current):
                    estimate = state.estimate(algo, current_amax=row.amax)
                elif state.history:
                    estimate = state.estimate(algo)
                else:
                    state.observe(row.amax)
                    continue
                scale = compute_scale(estimate, args.max_val)
                evaluated += 1
                if row.amax * scale > args.max_val:
                    saturated += 1
                ratios.append(estimate / row.amax)
                state.observe(row.amax)
            mean_ratio = sum(ratios) / len(ratios) if ratios else float("nan")
            out_lines.append(
                f"{algo_name(algo)},{layer_id},{role},{evaluated},{saturated},{mean_ratio!r}"
            )
    text = "\n".join(out_lines) + "\n"
    if args.out:
        harness.atomic_write_text(args.out, text)
        print(f"report written to {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _grid_kind(value: float, params: CodecParams) -> tuple[str, str, str]:
    """(kind, mantissa_bits, step) annotations for one grid magnitude.

    The mantissa width annotated is the one governing the point's
    spacing, i.e. the tier of its binade.  The clip bound, when it does
    not fall on the regular lattice, is marked 'clip'.
    """
    mag = abs(value)
    if mag == 0.0:
        return "zero", "", ""
    emin = params.min_normal_exponent
    if mag < 2.0**emin:
        m = tier_of(2.0**emin).mantissa_bits
        return "subnormal", str(m), repr(2.0 ** (emin - m))
    e = math.frexp(mag)[1] - 1
    m = tier_of(min(2.0 ** (e + 1), 32768.0)).mantissa_bits
    step = 2.0 ** (e - m)
    if mag / step != int(mag / step):
        return "clip", str(m), ""
    return "normal", str(m), repr(step)


def cmd_grid_dump(args) -> int:
    params = CodecParams(max_val=args.max_val, min_normal_exponent=args.min_exp)
    mags = representable_grid(params)
    values = [-v for v in reversed(mags[1:])] + list(mags)
    lines = ["value,kind,mantissa_bits,step"]
    for v in values:
        kind, m, step = _grid_kind(float(v), params)
        lines.append(f"{float(v)!r},{kind},{m},{step}")
    text = "\n".join(lines) + "\n"
    if args.out:
        harness.atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    print(f"count: {len(values)}")
    return EXIT_OK


def cmd_layout_dump(args) -> int:
    if args.blocks == REFERENCE_ARCH.n_blocks:
        arch = REFERENCE_ARCH
    else:
        ref = REFERENCE_ARCH
        per_block = 3 * ref.hidden * ref.intermediate
        arch = ArchSpec(n_blocks=args.blocks, hidden=ref.hidden,
                        intermediate=ref.intermediate,
                        total_params=max(1, int(args.blocks * per_block / 0.6)))
    layout = build_layout(arch, args.hp)
    text = layout_to_json(layout, arch) + "\n"
    if args.out:
        harness.atomic_write_text(args.out, text)
        print(f"layout written to {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hif8lab",
        description="Desk-scale HiF8 W8A8 quantization-aware training lab",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment plus its baseline")
    p_run.add_argument("--config", required=True, help="flat JSON config file")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.set_defaults(func=cmd_run)

    p_matrix = sub.add_parser("matrix", help="replay the experiment matrix")
    p_matrix.add_argument("--presets", help="directory of *.json presets "
                                            "(default: the built-in six)")
    p_matrix.add_argument("--out", required=True, help="output directory")
    p_matrix.add_argument("--steps", type=int, default=600,
                          help="total steps for the built-in presets")
    p_matrix.set_defaults(func=cmd_matrix)

    p_replay = sub.add_parser("replay-trace",
                              help="replay a recorded amax trace through scaling strategies")
    p_replay.add_argument("--trace", required=True, help="amax trace CSV")
    p_replay.add_argument("--algos", required=True,
                          help="comma-separated list: most_recent,exp_smooth,max,current")
    p_replay.add_argument("--max-val", type=float, default=15.0, dest="max_val")
    p_replay.add_argument("--history", type=int, default=64)
    p_replay.add_argument("--window", type=int, default=None)
    p_replay.add_argument("--out", help="write the report CSV here instead of stdout")
    p_replay.set_defaults(func=cmd_replay_trace)

    p_grid = sub.add_parser("grid-dump", help="list the representable grid")
    p_grid.add_argument("--max-val", type=float, default=15.0, dest="max_val")
    p_grid.add_argument("--min-exp", type=int, default=-10, dest="min_exp")
    p_grid.add_argument("--out", help="write the CSV here instead of stdout")
    p_grid.set_defaults(func=cmd_grid_dump)

    p_layout = sub.add_parser("layout-dump", help="dump a quantization layout as JSON")
    p_layout.add_argument("--blocks", type=int, default=REFERENCE_ARCH.n_blocks)
    p_layout.add_argument("--hp", type=int, default=5,
                          help="number of high-precision boundary blocks")
    p_layout.add_argument("--out", help="write the JSON here instead of stdout")
    p_layout.set_defaults(func=cmd_layout_dump)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (Hif8Error, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
