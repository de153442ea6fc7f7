"""Command-line entry point: ``jacbound <subcommand> ...``.

Exit codes: 0 success, 1 invalid input (including usage errors), 2 numeric failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import os
import sys
from dataclasses import replace
from typing import List, Optional

import numpy as np

from . import __version__
from .archive import canonical_json, envelope, read_dataset_csv, read_weights, write_json, write_weights
from .capacity_bounds import build_report, layer_norm_report, width_op_multiplier, width_ops_of
from .errors import NumericError, ValidationError
from .linalg_core import DEFAULT_TOL
from .relu_network import ConvCirculant, Dense, NetworkSpec, WidthChange, jacobian_stats
from .structured_operators import WidthOp, circulant_certificate

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2
EXPERIMENTS = ("fig1a", "fig1b", "fig1c", "fig2")


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with code 1 instead of argparse's default 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _common(p, seed: bool = True):
    if seed:
        p.add_argument("--seed", type=int, required=True, help="seed for power-iteration start vectors and sampling")
    p.add_argument("--tol", type=float, default=DEFAULT_TOL, help="power-iteration relative tolerance")
    p.add_argument("--out", help="write the result here instead of stdout")
    p.add_argument("--timestamp", action="store_true", help="record a UTC timestamp in the report envelope")
    p.add_argument("--signed-maxpool", action="store_true", help="max-pool by signed value instead of magnitude")


def _data_args(p, required=True):
    p.add_argument("--data", required=required, help="CSV dataset: label, then features")
    p.add_argument("--R", type=float, help="declared input-norm radius (default: observed max norm)")
    p.add_argument("--n-class", type=int, help="number of classes (default: max label + 1)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="jacbound", description="Jacobian-based capacity audits for bias-free ReLU networks.")
    ap.add_argument("--version", action="version", version=f"jacbound {__version__}")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("norms", help="per-layer spectral, Frobenius and (2,1) norms")
    p.add_argument("--weights", required=True, help="GBWT0001 weight archive")
    p.add_argument("--rank", type=int, help="override the numeric rank of every layer")
    _common(p)

    p = sub.add_parser("jacobian", help="per-input Jacobian spectral norms and their maxima")
    p.add_argument("--weights", required=True)
    _data_args(p)
    p.add_argument("--from", dest="i", type=int, help="first layer of an extra range (1-based)")
    p.add_argument("--to", dest="j", type=int, help="last layer of an extra range")
    _common(p)

    p = sub.add_parser("bounds", help="evaluate every capacity bound on a trained network")
    p.add_argument("--weights", required=True)
    _data_args(p)
    p.add_argument("--gamma", type=float, required=True, help="margin")
    p.add_argument("--delta", type=float, required=True, help="confidence level in (0, 1)")
    p.add_argument("--bounded-loss", type=float, dest="b", help="loss bound b for the bounded-loss variant")
    p.add_argument("--rank", type=int)
    p.add_argument("--k", type=int, help="filter length (conv terms)")
    p.add_argument("--s", type=int, help="stride (conv terms)")
    p.add_argument("--n", type=int, nargs="+", help="filters per conv layer")
    p.add_argument("--csv", help="also write the values map as CSV")
    _common(p)

    p = sub.add_parser("erc", help="empirical Rademacher complexity estimates")
    p.add_argument("--weights", required=True, action="append", help="archive; repeat to form a finite class")
    _data_args(p)
    p.add_argument("--mode", choices=("exact-finite", "ascent"), required=True)
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--draws", type=int, default=20)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--step-size", type=float, default=0.1)
    p.add_argument("--cap-scale", type=float, default=1.0, help="spectral caps = scale * current layer norms")
    _common(p)

    p = sub.add_parser("verify-circulant", help="check the orthonormal-filter norm identity")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--s", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--p", type=int, required=True, help="input width (multiple of s, at least k)")
    _common(p)

    p = sub.add_parser("train", help="train a network with minibatch SGD")
    _data_args(p, required=False)
    p.add_argument("--synthetic", nargs=3, type=int, metavar=("P0", "N_CLASS", "M"), help="use a synthetic mixture")
    p.add_argument("--arch", required=True, help="JSON list of layer descriptors, or a file holding one")
    p.add_argument("--init", default="gaussian_scaled", choices=("gaussian_scaled", "orthogonal_filters"))
    p.add_argument("--objective", default="cross_entropy", choices=("cross_entropy", "ramp_surrogate"))
    p.add_argument("--constraint", default="none", choices=("none", "unit_norm", "orthonormal"))
    p.add_argument("--filter-scale", type=float, default=1.0)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--out-weights", required=True, help="where to write the trained archive")
    p.add_argument("--out-dir", help="directory for history.csv and history.png")
    _common(p)

    p = sub.add_parser("experiment", help="run a figure experiment; writes CSV and PNG")
    p.add_argument("name", choices=EXPERIMENTS)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n-inits", type=int, default=50, help="fig2: number of random initializations")
    p.add_argument("--train-epochs", type=int, default=0, help="fig2: training epochs per initialization")
    p.add_argument("--epochs", type=int, help="override the desk-default epoch count")
    p.add_argument("--no-plot", action="store_true", help="skip the PNG figure")
    return ap


# ---------------------------------------------------------------------------
# helpers


def _load_net(path: str, signed: bool) -> NetworkSpec:
    net = read_weights(path)
    if not signed:
        return net
    layers = []
    for layer in net.layers:
        if isinstance(layer, WidthChange) and layer.op.kind == "max_pool":
            op = layer.op
            layer = WidthChange(WidthOp(op.kind, op.p, op.s, op.coeffs, True))
        layers.append(layer)
    return NetworkSpec(tuple(layers))


def _load_data(args):
    policy = "declared" if args.R is not None else "observed"
    return read_dataset_csv(args.data, policy, args.R, args.n_class)


# paths are echoed by file name only so reports do not depend on the working directory
_PATH_ARGS = ("weights", "data", "csv")


def _emit(args, command: str, payload) -> None:
    cfg = {}
    for k, v in sorted(vars(args).items()):
        if k in ("out", "timestamp", "command"):
            continue
        if k in _PATH_ARGS and v is not None:
            v = [os.path.basename(x) for x in v] if isinstance(v, list) else os.path.basename(v)
        cfg[k] = v
    ts = _dt.datetime.now(_dt.timezone.utc).isoformat() if getattr(args, "timestamp", False) else None
    env = envelope(command, cfg, payload, ts)
    if args.out:
        write_json(env, args.out)
    else:
        sys.stdout.write(canonical_json(env) + "\n")


def _conv_terms(net: NetworkSpec, args):
    if args.k is not None:
        if args.s is None or args.n is None:
            raise ValidationError("--k needs --s and --n as well")
        return args.k, args.s, list(args.n)
    convs = [l for l in net.layers if isinstance(l, ConvCirculant)]
    if convs and not any(isinstance(l, Dense) for l in net.layers):
        ks = {c.bank.k for c in convs}
        ss = {c.bank.s for c in convs}
        if len(ks) == 1 and len(ss) == 1:
            return ks.pop(), ss.pop(), [c.bank.n for c in convs]
    return None


# ---------------------------------------------------------------------------
# subcommands


def cmd_norms(args) -> int:
    net = _load_net(args.weights, args.signed_maxpool)
    table = layer_norm_report(net, args.tol, args.seed, args.rank)
    payload = table.to_dict()
    payload["width_op_multiplier"] = width_op_multiplier(width_ops_of(net))
    payload["rows_consistent"] = table.rows_consistent()
    _emit(args, "norms", payload)
    return EXIT_OK


def cmd_jacobian(args) -> int:
    net = _load_net(args.weights, args.signed_maxpool)
    data = _load_data(args)
    ranges = []
    if args.i is not None or args.j is not None:
        if args.i is None or args.j is None:
            raise ValidationError("--from and --to go together")
        ranges.append((args.i, args.j))
    st = jacobian_stats(net, data.inputs, args.tol, args.seed, ranges=ranges)
    _emit(args, "jacobian", st.to_dict())
    return EXIT_OK if st.converged else EXIT_NUMERIC


def cmd_bounds(args) -> int:
    net = _load_net(args.weights, args.signed_maxpool)
    data = _load_data(args)
    rep = build_report(net, data, args.gamma, args.delta, args.b, args.rank, _conv_terms(net, args), args.tol, args.seed)
    _emit(args, "bounds", rep.to_dict())
    if args.csv:
        from .trainer_experiments import to_csv

        with open(args.csv, "w") as fh:
            fh.write(to_csv(("bound_name", "value"), sorted(rep.values.items())))
    return EXIT_OK


def cmd_erc(args) -> int:
    from .erc_estimator import FiniteClass, erc_ascent, erc_exact_finite

    nets = [_load_net(w, args.signed_maxpool) for w in args.weights]
    data = _load_data(args)
    if args.mode == "exact-finite":
        value = erc_exact_finite(FiniteClass(nets, args.gamma), data)
        payload = {"mode": "exact-finite", "members": len(nets), "erc": value}
    else:
        if len(nets) != 1:
            raise ValidationError("ascent mode takes exactly one template archive")
        from .relu_network import layer_lipschitz

        template = nets[0]
        caps = [args.cap_scale * layer_lipschitz(l, args.tol, args.seed) if not isinstance(l, WidthChange) else 1.0
                for l in template.layers]
        res = erc_ascent(template, caps, data, args.gamma, args.draws, args.steps, args.step_size, args.seed)
        payload = {
            "mode": "ascent",
            "estimate": "lower bound (heuristic)",
            "mean": res.mean,
            "std": res.std,
            "per_draw": res.per_draw,
            "caps": caps,
        }
    _emit(args, "erc", payload)
    return EXIT_OK


def cmd_verify_circulant(args) -> int:
    cert = circulant_certificate(args.k, args.s, args.n, args.p, args.seed, args.tol)
    _emit(args, "verify-circulant", cert)
    return EXIT_OK if cert["pass"] else EXIT_VALIDATION


def _parse_arch(text: str):
    if os.path.exists(text):
        with open(text) as fh:
            text = fh.read()
    try:
        arch = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"--arch is not valid JSON: {exc}") from exc
    if not isinstance(arch, list) or not all(isinstance(a, dict) and "type" in a for a in arch):
        raise ValidationError("--arch must be a JSON list of objects with a 'type' key")
    return arch


def cmd_train(args) -> int:
    from . import trainer_experiments as te

    if args.synthetic:
        p0, n_class, m = args.synthetic
        m_train = max(1, int(round(0.8 * m)))
        train, test = te.synth_dataset(p0, n_class, m_train, m - m_train, args.seed, args.R or 1.0)
    elif args.data:
        train, test = te.train_test_split(_load_data(args), args.seed)
    else:
        raise ValidationError("train needs --data or --synthetic")
    cfg = te.TrainConfig(
        arch=_parse_arch(args.arch),
        init=args.init,
        lr=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        objective=args.objective,
        filter_scale=args.filter_scale,
        constraint=args.constraint,
        gamma=args.gamma,
    )
    net = te.init_network(cfg, train.dim)
    net, hist = te.sgd_train(net, train, cfg, test)
    write_weights(net, args.out_weights)
    text = te.history_csv(hist)
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        with open(os.path.join(args.out_dir, "history.csv"), "w") as fh:
            fh.write(text)
        from .plotting import plot_history

        plot_history(hist, os.path.join(args.out_dir, "history.png"))
    sys.stdout.write(text)
    return EXIT_OK


def run_experiment(name: str, out_dir: str, seed: int, n_inits: int = 50, train_epochs: int = 0,
                   epochs: Optional[int] = None, plot: bool = True) -> str:
    """Run one figure experiment at desk defaults; writes ``<name>.csv`` (and ``.png``) and returns the CSV text."""
    from . import plotting
    from . import trainer_experiments as te

    os.makedirs(out_dir, exist_ok=True)
    if name in ("fig1a", "fig1b"):
        cfg, train, test = te.desk_cnn_setup(seed)
    else:
        cfg, train, test = te.desk_dense_setup(seed, depth=6 if name == "fig2" else 2)
    if epochs is not None:
        cfg = replace(cfg, epochs=epochs)
    if name == "fig1a":
        text, terms, _, _ = te.experiment_fig1a(cfg, train, test)
        fig = lambda path: plotting.plot_fig1a(terms, path)
    elif name == "fig1b":
        text, rows = te.experiment_fig1b(te.FIG1B_SCALES, cfg, train, test)
        fig = lambda path: plotting.plot_fig1b(rows, path)
    elif name == "fig1c":
        text, rows = te.experiment_fig1c(te.FIG1C_DEPTHS, cfg, train)
        fig = lambda path: plotting.plot_fig1c(rows, path)
    else:
        text, rows = te.experiment_fig2(cfg, train, n_inits, train_epochs)
        fig = lambda path: plotting.plot_fig2(rows, path)
    with open(os.path.join(out_dir, f"{name}.csv"), "w") as fh:
        fh.write(text)
    if plot:
        fig(os.path.join(out_dir, f"{name}.png"))
    return text


def cmd_experiment(args) -> int:
    text = run_experiment(args.name, args.out, args.seed, args.n_inits, args.train_epochs, args.epochs, not args.no_plot)
    sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "norms": cmd_norms,
    "jacobian": cmd_jacobian,
    "bounds": cmd_bounds,
    "erc": cmd_erc,
    "verify-circulant": cmd_verify_circulant,
    "train": cmd_train,
    "experiment": cmd_experiment,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_VALIDATION
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_VALIDATION
    try:
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"jacbound: {exc.code} error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericError as exc:
        print(f"jacbound: {exc.code} error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"jacbound: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
