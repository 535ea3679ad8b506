"""Command-line front end.

Exit codes: 0 success, 1 error (I/O, parse, invalid input), 2 analysis
negative (refused certificate, singular operator, smallness violated).
"""

import argparse
import csv
import json
import os
import sys

import numpy as np

from polydich.errors import PolyDichError
from polydich.serialize import dumps_canonical

EXIT_OK, EXIT_ERROR, EXIT_NEGATIVE = 0, 1, 2


def _write(path, text):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def _load_json(path):
    with open(path) as fh:
        return json.load(fh)


def _threads(args):
    if getattr(args, "threads", None):
        os.environ["POLYDICH_THREADS"] = str(args.threads)


def _norms_for(kind, system):
    from polydich.dichotomy import certify
    from polydich.norms import NormSequence
    from polydich.system import Cocycle

    if kind in ("base", "euclidean"):
        return NormSequence.base_norm()
    if kind in ("sup", "one"):
        return NormSequence.base_norm(kind)
    if kind in ("adapted-nonuniform", "adapted-strong"):
        cert = certify(system)
        k = cert.constants
        if "lambda_nonuniform" not in k:
            raise PolyDichError("adapted norms need a nonuniform fit: " + "; ".join(cert.errors))
        cocycle = Cocycle(system)
        if kind == "adapted-nonuniform":
            return NormSequence.adapted_nonuniform(cocycle, cert, k["lambda_nonuniform"])
        return NormSequence.adapted_strong(cocycle, cert, k["lambda_nonuniform"], k["b"])
    raise PolyDichError(f"unknown norm family {kind!r}")


def _rhs(path, N, d):
    data = _load_json(path)
    if isinstance(data, dict):
        unknown = set(data) - {"entries"}
        if unknown:
            raise PolyDichError(f"unknown rhs fields: {sorted(unknown)}")
        data = data["entries"]
    y = np.asarray(data, dtype=float)
    if y.shape != (N, d):
        raise PolyDichError(f"rhs must have shape ({N}, {d}), got {y.shape}")
    return y


# --- commands -------------------------------------------------------------------


def cmd_generate(args):
    from polydich.system import make_generator, save_system

    params = json.loads(args.params) if args.params else {}
    seq = make_generator(args.kind, params, args.dimension, args.horizon)
    save_system(seq, args.out, explicit=args.explicit)
    return EXIT_OK


def cmd_certify(args):
    from polydich.dichotomy import CertifyOptions, certify
    from polydich.errors import SpectralGapError, TransversalityError, UnstableRestrictionError
    from polydich.system import load_system

    system = load_system(args.system)
    norms = _norms_for(args.norms, system)
    opts = CertifyOptions(theta=args.theta, probes=args.probes, seed=args.seed)
    try:
        cert = certify(system, norms, opts)
    except (SpectralGapError, TransversalityError, UnstableRestrictionError) as exc:
        _write(args.out, dumps_canonical({"refused": True, "diagnostic": str(exc)}))
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_NEGATIVE
    out = cert.to_json()
    _write(args.out, dumps_canonical(out))
    if args.figure:
        from polydich.plotting import plot_certificate

        plot_certificate(cert, args.figure)
    ok = cert.flags["dichotomy"] or cert.flags["strong"]
    if not ok:
        diag = "; ".join(cert.errors) or "no dichotomy flag"
        print(f"refused: bounded={str(cert.residuals.get('bounded')).lower()}; {diag}",
              file=sys.stderr)
    return EXIT_OK if ok else EXIT_NEGATIVE


def _Z_for(choice, system, cert):
    d = system.dimension
    if choice == "full":
        return np.eye(d)
    if choice == "zero":
        return np.zeros((d, 0))
    if choice == "cert":
        if cert is None:
            raise PolyDichError("--Z cert needs --cert")
        return cert.Z
    return np.asarray(_load_json(choice), dtype=float).reshape(d, -1)


def cmd_solve(args):
    from polydich.admissibility import (
        TZOperator,
        green_solve,
        invertibility_report,
        solve_truncated,
    )
    from polydich.dichotomy import DichotomyCertificate, certify
    from polydich.oracle import OracleConfig, dense_tz_solve
    from polydich.system import load_system

    system = load_system(args.system)
    N, d = system.horizon, system.dimension
    cert = DichotomyCertificate.from_json(_load_json(args.cert), system) if args.cert else None
    if args.report:
        Z = _Z_for(args.Z or ("cert" if cert is not None else "full"), system, cert)
        T = TZOperator(system, Z)
        rep = invertibility_report(T, cert if cert is not None and args.Z in (None, "cert") else None,
                                   probes=args.probes, seed=args.seed)
        out = rep.to_json()
        _write(args.out, dumps_canonical(out))
        if rep.diagnostic:
            print(rep.diagnostic, file=sys.stderr)
        return EXIT_OK if rep.invertible else EXIT_NEGATIVE
    if not args.rhs:
        raise PolyDichError("--rhs is required for --green and --truncated")
    y = _rhs(args.rhs, N, d)
    if np.any(y[0] != 0):
        raise PolyDichError("not in Y_0: the first entry of the right-hand side must vanish")
    if cert is None:
        cert = certify(system)
    Z = _Z_for(args.Z or "cert", system, cert)
    T = TZOperator(system, Z)
    if args.truncated:
        cfg = OracleConfig()
        if d <= cfg.max_dim and N <= cfg.max_horizon:
            x, method = dense_tz_solve(system.matrices, Z, y), "dense"
        else:
            x, method = solve_truncated(T, y), "sparse"
        res = T.apply(x) - y
        out = {"x": x, "method": method, "truncated": True,
               "defect": float(np.abs(res[1:]).max(initial=0.0))}
    else:
        sol = green_solve(T, cert, y)
        x = sol.x
        out = {"x": x, "method": "green", "truncated": True, "defect": sol.defect}
    out["sup_x"] = float(T.norms.sequence_sup(x))
    out["sup_y"] = float(T.norms.sequence_sup(y))
    _write(args.out, dumps_canonical(out))
    return EXIT_OK


def cmd_perturb(args):
    from polydich.robustness import PerturbationSpec, RobustnessOptions, robustness_experiment
    from polydich.system import load_system

    system = load_system(args.system)
    spec = PerturbationSpec(args.c, 0.0, args.mode, args.regime, args.seed)
    opts = RobustnessOptions(seeds=list(range(args.seed, args.seed + args.seeds)),
                             threads=args.threads, probes=args.probes,
                             c_from_product=args.c_product)
    report = robustness_experiment(system, spec, opts)
    _write(args.out, dumps_canonical(report))
    if args.figure:
        from polydich.plotting import plot_robustness

        plot_robustness(report, args.figure)
    return EXIT_OK if report["smallness_ok"] else EXIT_NEGATIVE


def cmd_lyapunov(args):
    from polydich.dichotomy import polynomial_lyapunov_exponent
    from polydich.system import Cocycle, load_system

    system = load_system(args.system)
    N, d = system.horizon, system.dimension
    cocycle = Cocycle(system)
    window = tuple(args.window) if args.window else None
    fits, orbits = {}, {}
    stack = cocycle.forward_stack(1, N)
    for i in range(d):
        v = np.eye(d)[i]
        fits[i] = polynomial_lyapunov_exponent(system, v, window, cocycle)
        orbits[i] = (np.arange(1, N + 1), np.linalg.norm(stack @ v, axis=1))
    if args.out in (None, "-"):
        fh = sys.stdout
    else:
        fh = open(args.out, "w", newline="")
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["vector_index", "slope", "r_squared", "window_lo", "window_hi"])
        for i, f in fits.items():
            w.writerow([i, format(f.slope, ".17g"), format(f.r_squared, ".17g"),
                        f.window[0], f.window[1]])
    finally:
        if fh is not sys.stdout:
            fh.close()
    if args.figure:
        from polydich.plotting import plot_lyapunov

        plot_lyapunov(orbits, fits, args.figure)
    return EXIT_OK


# --- parser -----------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="polydich", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None,
                   help="cap on worker threads (also POLYDICH_THREADS)")
    p.add_argument("--config", default=None,
                   help="JSON file of option values; unknown keys are rejected")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a system spec from a generator")
    g.add_argument("--kind", required=True)
    g.add_argument("--params", default=None, help="generator parameters as JSON")
    g.add_argument("--dimension", type=int, required=True)
    g.add_argument("--horizon", type=int, required=True)
    g.add_argument("--explicit", action="store_true", help="store matrices, not the generator")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    c = sub.add_parser("certify", help="certify a dichotomy and write the certificate")
    c.add_argument("--system", required=True)
    c.add_argument("--norms", default="base",
                   help="base|sup|one|adapted-nonuniform|adapted-strong")
    c.add_argument("--theta", type=float, default=0.1, help="spectral gap margin")
    c.add_argument("--probes", type=int, default=64)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", default="-")
    c.add_argument("--figure", default=None, help="PNG of gamma_n and ||P_n|| (+ CSV)")
    c.set_defaults(func=cmd_certify)

    s = sub.add_parser("solve", help="solve T_Z x = y or report on invertibility")
    mode = s.add_mutually_exclusive_group(required=True)
    mode.add_argument("--green", action="store_true")
    mode.add_argument("--truncated", action="store_true")
    mode.add_argument("--report", action="store_true")
    s.add_argument("--system", required=True)
    s.add_argument("--cert", default=None)
    s.add_argument("--rhs", default=None)
    s.add_argument("--Z", default=None, help="full|cert|zero|path to a basis JSON")
    s.add_argument("--probes", type=int, default=256)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_solve)

    r = sub.add_parser("perturb", help="robustness experiment")
    r.add_argument("--system", required=True)
    r.add_argument("--c", type=float, default=0.0)
    r.add_argument("--c-product", type=float, default=None,
                   help="choose c so that cC * inv_norm_upper equals this value")
    r.add_argument("--regime", choices=("strong", "weak"), default="strong")
    r.add_argument("--mode", choices=("random-direction", "adversarial-aligned"),
                   default="random-direction")
    r.add_argument("--seeds", type=int, default=32)
    r.add_argument("--seed", type=int, default=0, help="first seed")
    r.add_argument("--probes", type=int, default=32)
    r.add_argument("--out", default="-")
    r.add_argument("--figure", default=None)
    r.set_defaults(func=cmd_perturb)

    ly = sub.add_parser("lyapunov", help="polynomial Lyapunov exponents of the basis vectors")
    ly.add_argument("--system", required=True)
    ly.add_argument("--window", type=int, nargs=2, default=None, metavar=("LO", "HI"))
    ly.add_argument("--out", default="-")
    ly.add_argument("--figure", default=None)
    ly.set_defaults(func=cmd_lyapunov)
    return p


def _apply_config(parser, args, argv):
    data = _load_json(args.config)
    if not isinstance(data, dict):
        raise PolyDichError("config must be a JSON object")
    known = {k for k in vars(args) if k not in ("func", "config", "command")}
    unknown = set(k.replace("-", "_") for k in data) - known
    if unknown:
        raise PolyDichError(f"unknown config fields: {sorted(unknown)}")
    explicit = {a.lstrip("-").split("=")[0].replace("-", "_") for a in argv if a.startswith("--")}
    for k, v in data.items():
        key = k.replace("-", "_")
        if key not in explicit:
            setattr(args, key, v)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.config:
            _apply_config(parser, args, argv)
        _threads(args)
        return args.func(args)
    except (PolyDichError, OSError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
