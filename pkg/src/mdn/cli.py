"""``mdn`` command line: verification, benchmarks, spectra, toy training, fixtures.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 numerical
fault (NaN/Inf). Settings resolve as built-in defaults < ``--config`` JSON <
flags given on the command line. The seed falls back to ``$MDN_SEED``.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
_META = {"command", "config", "save_config", "out", "json", "func"}


class CliError(Exception):
    def __init__(self, msg: str, code: int = EXIT_USAGE):
        super().__init__(msg)
        self.code = code


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _emit(text: str, out: str) -> None:
    if out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def _ints(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _unit(text: str) -> float:
    x = float(text)
    if not 0 <= x <= 1:
        raise argparse.ArgumentTypeError(f"{text} is outside [0, 1]")
    return x


def _seed_default() -> int:
    env = os.environ.get("MDN_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise CliError(f"MDN_SEED must be an integer, got {env!r}")


# ---------------------------------------------------------------- inputs


def _shape_args(p, T=64, d=16, B=2, H=2):
    p.add_argument("--B", type=int, default=B, help="batch size")
    p.add_argument("--T", type=int, default=T, help="sequence length")
    p.add_argument("--H", type=int, default=H, help="heads")
    p.add_argument("--dk", type=int, default=d, help="key dimension")
    p.add_argument("--dv", type=int, default=None, help="value dimension (default: dk)")


def _gate_override_args(p):
    for g in ("alpha", "beta", "mu"):
        p.add_argument(f"--{g}", type=_unit, default=None,
                       help=f"replace every {g} by this constant (default: sampled)")
    p.add_argument("--eta", type=float, default=None, help="replace every eta by this constant (default: sampled)")


def _fixture_args(p):
    p.add_argument("--inputs", default=None, help="read inputs from a directory of .mdnt files instead of sampling")
    p.add_argument("--save-inputs", default=None, help="write the inputs used to this directory")


def _make_inputs(a):
    from .io import load_inputs, save_inputs
    from .recurrent import AttnInputs
    from .sampling import override_gates, random_inputs
    from .tensor import as_dtype

    dt = as_dtype(a.dtype)
    if a.inputs:
        x = load_inputs(a.inputs).astype(dt)
    else:
        for name in ("B", "T", "H", "dk"):
            if getattr(a, name) < 1:
                raise CliError(f"--{name} must be >= 1")
        if a.dv is not None and a.dv < 1:
            raise CliError("--dv must be >= 1")
        rng = np.random.default_rng(a.seed)
        x = random_inputs(rng, a.B, a.T, a.H, a.dk, a.dv, dtype=dt)
    if a.eta is not None and not 0 <= a.eta <= 2:
        raise CliError("--eta must lie in [0, 2]")
    g = override_gates(x.gates, alpha=a.alpha, beta=a.beta, mu=a.mu, eta=a.eta)
    x = AttnInputs(x.q, x.k, x.v, g.astype(dt), x.scale, x.p)
    if a.save_inputs:
        save_inputs(a.save_inputs, x)
    return x


# ---------------------------------------------------------------- commands


def cmd_verify(a) -> int:
    from .verify import format_table, run_suite

    checks = run_suite(seed=a.seed, dtype=a.dtype, tol=a.tol, kernel=a.kernel, mu=a.mu, workers=a.workers)
    table = format_table(checks)
    _emit(table + "\n", a.out)
    failed = [c for c in checks if not c.passed]
    if failed:
        print(f"verify: first failing case: {failed[0].name} "
              f"(err {failed[0].err:.3e} > tol {failed[0].tol:.1e})", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_bench(a) -> int:
    from .bench import EquivalenceError, run_bench

    try:
        rep = run_bench(a.T, a.C, B=a.B, H=a.H, dk=a.dk, dv=a.dv, dtype=a.dtype, reps=a.reps,
                        warmup=a.warmup, workers=a.workers, seed=a.seed)
    except EquivalenceError as e:
        print(f"bench: {e}", file=sys.stderr)
        return EXIT_FAIL
    _emit(rep.to_csv(), a.out)
    if a.json:
        Path(a.json).write_text(rep.to_json() + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_spectrum(a) -> int:
    from .spectral import parse_axis, spectrum_sweep, sweep_to_csv

    axes = [parse_axis(s) for s in (a.alpha, a.beta, a.mu, a.eta)]
    rows = spectrum_sweep(*axes, constrained=a.constrained, knorm2=a.knorm2)
    _emit(sweep_to_csv(rows), a.out)
    return EXIT_OK


def cmd_mqar_train(a) -> int:
    from .mqar import TrainConfig, trace_to_csv, train_toy

    gate = {k: getattr(a, f"gate_{k}") for k in ("a", "b", "s", "tau", "mu_min_log")
            if getattr(a, f"gate_{k}") is not None}
    cfg = TrainConfig(dim=a.dim, heads=a.heads, steps=a.steps, lr=a.lr, momentum=a.momentum,
                      batch=a.batch, vocab_k=a.vocab_k, vocab_v=a.vocab_v, n_pairs=a.n_pairs,
                      n_queries=a.n_queries, seq_len=a.seq_len, eval_every=a.eval_every,
                      eval_size=a.eval_size, seed=a.seed, gate=gate)
    progress = (lambda r: print(f"step {r['step']}: loss {r['loss']:.4f} acc {r['acc']:.3f}",
                                file=sys.stderr)) if a.verbose else None
    trace = train_toy(cfg, progress)
    _emit(trace_to_csv(trace), a.out)
    return EXIT_OK


def cmd_statenorm(a) -> int:
    from .recurrent import mdn_recurrent_forward, state_change_norm

    x = _make_inputs(a)
    _, _, trace = mdn_recurrent_forward(x, record_states=True, workers=a.workers)
    ds = state_change_norm(trace)
    if not np.all(np.isfinite(ds)):
        raise FloatingPointError("state change norm is non-finite")
    _emit(_csv([(t + 1, repr(float(v))) for t, v in enumerate(ds)], ("t", "delta_s")), a.out)
    return EXIT_OK


def cmd_dump_coeffs(a) -> int:
    from .chunkwise import check_chunk_size
    from .coefficients import chunk_coefficients

    x = _make_inputs(a)
    check_chunk_size(a.C)
    g = x.gates
    B, T, H = g.shape
    if a.chunk < 0 or a.chunk * a.C >= T:
        raise CliError(f"--chunk {a.chunk} is outside the {-(-T // a.C)} chunks of T={T}")
    sl = slice(a.chunk * a.C, min((a.chunk + 1) * a.C, T))
    co = chunk_coefficients(g.log_alpha[:, sl].swapaxes(1, 2), g.log_mu[:, sl].swapaxes(1, 2),
                            g.beta[:, sl].swapaxes(1, 2), a.chunk, eps=a.eps)
    C = co.b.shape[-1]
    header = ("b", "h", "t", "log_abar", "log_mbar", "log_c", "b_t", *(f"gamma_{j}" for j in range(C)))
    rows = []
    for bi in range(B):
        for hi in range(H):
            for t in range(C):
                rows.append((bi, hi, t, *(repr(float(v[bi, hi, t])) for v in
                                          (co.log_abar, co.log_mbar, co.log_c, co.b)),
                             *(repr(float(v)) for v in co.Gamma[bi, hi, t])))
    _emit(_csv(rows, header), a.out)
    return EXIT_OK


# ---------------------------------------------------------------- parser


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    def _get_help_string(self, action):
        if "default" in (action.help or ""):
            return action.help
        return super()._get_help_string(action)


def _suppress_defaults(parser: argparse.ArgumentParser) -> None:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sub in action.choices.values():
                _suppress_defaults(sub)
        elif action.dest not in ("help", "command"):
            action.default = argparse.SUPPRESS


def build_parser(suppress: bool = False) -> argparse.ArgumentParser:
    """The full parser. ``suppress=True`` drops every default so that parsing
    reveals which flags were typed (used to layer ``--config`` underneath)."""
    fmt = _HelpFormatter
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="RNG seed (default: $MDN_SEED, else 0)")
    common.add_argument("--config", default=None, help="JSON file of settings; flags given on the command line win")
    common.add_argument("--save-config", default=None, help="write the resolved settings as JSON to this path")
    common.add_argument("--workers", type=int, default=1, help="lane worker threads")
    common.add_argument("--out", default="-", help="output path ('-' for stdout)")

    parser = argparse.ArgumentParser(prog="mdn", description=__doc__.split("\n")[0], formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    kw = dict(parents=[common], formatter_class=fmt)

    p = sub.add_parser("verify", help="oracle-equivalence and invariant suite", **kw)
    p.add_argument("--dtype", choices=("f32", "f64"), default="f64", help="kernel precision")
    p.add_argument("--tol", type=float, default=None,
                   help="override every tolerance (default: 1e-10 f64 / 3e-3 f32, 1e-12 reductions)")
    p.add_argument("--kernel", choices=("chunkwise", "recurrent"), default="chunkwise", help="kernel under test")
    p.add_argument("--mu", type=_unit, default=None, help="constant mu for the equivalence cases (default: sampled)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="recurrent vs chunkwise wall time", **kw)
    p.add_argument("--T", type=_ints, default=[256, 1024, 4096], help="comma-separated sequence lengths")
    p.add_argument("--C", type=_ints, default=[64], help="comma-separated chunk sizes")
    p.add_argument("--B", type=int, default=1, help="batch size")
    p.add_argument("--H", type=int, default=1, help="heads")
    p.add_argument("--dk", type=int, default=64, help="key dimension")
    p.add_argument("--dv", type=int, default=None, help="value dimension (default: dk)")
    p.add_argument("--dtype", choices=("f32", "f64"), default="f64", help="precision")
    p.add_argument("--reps", type=int, default=5, help="timed repetitions per cell (>= 5)")
    p.add_argument("--warmup", type=int, default=3, help="untimed warm-up repetitions (>= 3)")
    p.add_argument("--json", default=None, help="also write a JSON summary with machine metadata here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("spectrum", help="closed-form root sweep over gate values", **kw)
    p.add_argument("--alpha", default="0:1:21", help="axis 'lo:hi:n' or a single value")
    p.add_argument("--beta", default="0:1:21", help="axis 'lo:hi:n' or a single value")
    p.add_argument("--mu", default="0:1:21", help="axis 'lo:hi:n' or a single value")
    p.add_argument("--eta", default="1", help="axis 'lo:hi:n' or a single value")
    p.add_argument("--knorm2", type=float, default=1.0, help="squared key norm")
    p.add_argument("--constrained", action="store_true", default=False,
                   help="keep only beta <= 1 - alpha and mu in [1/e, 1)")
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("mqar-train", help="train the toy recall model, CSV trace step,loss,acc", **kw)
    p.add_argument("--dim", type=int, default=64, help="model width")
    p.add_argument("--heads", type=int, default=1, help="heads")
    p.add_argument("--steps", type=int, default=2000, help="SGD steps")
    p.add_argument("--lr", type=float, default=0.5, help="learning rate")
    p.add_argument("--momentum", type=float, default=0.9, help="SGD momentum")
    p.add_argument("--batch", type=int, default=32, help="sequences per step")
    p.add_argument("--vocab-k", type=int, default=16, help="key vocabulary")
    p.add_argument("--vocab-v", type=int, default=16, help="value vocabulary")
    p.add_argument("--n-pairs", type=int, default=2, help="key/value pairs per sequence")
    p.add_argument("--n-queries", type=int, default=2, help="queries per sequence")
    p.add_argument("--seq-len", type=int, default=None, help="padded length (default: minimal)")
    p.add_argument("--eval-every", type=int, default=100, help="steps between evaluations")
    p.add_argument("--eval-size", type=int, default=256, help="held-out sequences")
    for k, d in (("a", "1.0"), ("b", "0.0"), ("s", "1.0"), ("tau", "sqrt(2*dim/heads)"), ("mu_min_log", "-2.0")):
        p.add_argument(f"--gate-{k.replace('_', '-')}", dest=f"gate_{k}", type=float, default=None,
                       help=f"gate parameter {k} (default: {d})")
    p.add_argument("--verbose", action="store_true", default=False, help="log each evaluation to stderr")
    p.set_defaults(func=cmd_mqar_train)

    p = sub.add_parser("statenorm", help="per-step mean |S_t - S_{t-1}|_F of the recurrent pass", **kw)
    _shape_args(p)
    p.add_argument("--dtype", choices=("f32", "f64"), default="f64", help="precision")
    _gate_override_args(p)
    _fixture_args(p)
    p.set_defaults(func=cmd_statenorm)

    p = sub.add_parser("dump-coeffs", help="log-domain chunk coefficients as CSV", **kw)
    _shape_args(p, T=16, d=4, B=1, H=1)
    p.add_argument("--C", type=int, default=16, help="chunk size")
    p.add_argument("--chunk", type=int, default=0, help="which chunk to dump")
    p.add_argument("--eps", type=float, default=0.0, help="added to beta before the log")
    p.add_argument("--dtype", choices=("f32", "f64"), default="f64", help="precision")
    _gate_override_args(p)
    _fixture_args(p)
    p.set_defaults(func=cmd_dump_coeffs)
    if suppress:
        _suppress_defaults(parser)
    return parser


def parse_args(argv) -> argparse.Namespace:
    args = build_parser().parse_args(argv)
    typed = vars(build_parser(suppress=True).parse_args(argv))
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise CliError(f"cannot read --config {args.config}: {e}")
        if not isinstance(data, dict):
            raise CliError("--config must hold a JSON object")
        known = set(vars(args)) - _META
        unknown = sorted(set(k.replace("-", "_") for k in data) - known)
        if unknown:
            raise CliError(f"unknown settings in {args.config}: {', '.join(unknown)}")
        for k, v in data.items():
            k = k.replace("-", "_")
            if k not in typed:
                setattr(args, k, v)
    if args.seed is None:
        args.seed = _seed_default()
    if getattr(args, "workers", 1) < 1:
        raise CliError("--workers must be >= 1")
    return args


def run_config(args) -> dict:
    """Settings that fully determine a run (with the seed)."""
    return {k: v for k, v in sorted(vars(args).items()) if k not in _META or k == "command"}


def main(argv=None) -> int:
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
    except SystemExit as e:   # argparse usage errors and --help
        return int(e.code or 0)
    except CliError as e:
        print(f"mdn: error: {e}", file=sys.stderr)
        return e.code
    from .io import MdntError
    from .mqar import NumericalFault
    from .verify import UsageError
    try:
        if args.save_config:
            Path(args.save_config).write_text(json.dumps(run_config(args), indent=2) + "\n", encoding="utf-8")
        with np.errstate(invalid="ignore", over="ignore"):
            return args.func(args)
    except CliError as e:
        print(f"mdn {args.command}: error: {e}", file=sys.stderr)
        return e.code
    except BrokenPipeError:
        return EXIT_OK
    except (NumericalFault, FloatingPointError) as e:
        print(f"mdn {args.command}: numerical fault: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, MdntError, ValueError, OSError) as e:
        print(f"mdn {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
