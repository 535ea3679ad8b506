"""Figures for the CLI report path.

Every figure is written next to a ``<stem>_data.csv`` with exactly the
plotted columns, so the numbers can be re-plotted elsewhere.  matplotlib is
imported lazily with the non-interactive Agg backend.
"""

import csv
import os

import numpy as np


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _csv_path(fig_path):
    # "_data" keeps it clear of a same-stem --out CSV
    return os.path.splitext(fig_path)[0] + "_data.csv"


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([format(v, ".17g") if isinstance(v, float) else v for v in r])


def plot_certificate(cert, path):
    """gamma_n and ||P_n|| against n, with the bound 2/gamma_n."""
    n = np.arange(1, cert.horizon + 1)
    g = np.asarray(cert.gamma, dtype=float)
    pn = np.asarray(cert.proj_norms, dtype=float)
    bound = 2.0 / g
    _write_csv(_csv_path(path), ["n", "gamma", "proj_norm", "proj_bound"],
               [(int(a), float(b), float(c), float(d)) for a, b, c, d in zip(n, g, pn, bound)])
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogx(n, g, label="gamma_n")
    ax.semilogx(n, pn, label="||P_n||")
    ax.semilogx(n, bound, "--", label="2 / gamma_n")
    ax.set_xlabel("n")
    ax.legend()
    ax.set_title("splitting angle and projection norms")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_lyapunov(orbits, fits, path):
    """log ||A(n,1) v_i|| against log n with fitted slopes.

    ``orbits`` maps vector index to (n, norms); ``fits`` to LyapunovResult.
    """
    rows = []
    for i, (n, vals) in orbits.items():
        rows.extend((i, int(k), float(v)) for k, v in zip(n, vals))
    _write_csv(_csv_path(path), ["vector_index", "n", "orbit_norm"], rows)
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6, 4))
    for i, (n, vals) in orbits.items():
        pos = vals > 0
        ax.loglog(n[pos], vals[pos], label=f"e_{i}: slope {fits[i].slope:.3f}")
    ax.set_xlabel("n")
    ax.set_ylabel("||A(n,1) v||")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_robustness(report, path):
    """Per-seed empirical gap against the bound cC, and a_hat against a + MCc."""
    seeds = report["seeds"]
    rows = [(r["seed"], float(r["empirical_gap"]), float(r.get("a_hat", float("nan"))))
            for r in seeds]
    _write_csv(_csv_path(path), ["seed", "empirical_gap", "a_hat"], rows)
    plt = _plt()
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    s = [r[0] for r in rows]
    axes[0].plot(s, [r[1] for r in rows], "o", label="empirical gap")
    axes[0].axhline(report["gap_bound"], color="k", ls="--", label="cC")
    axes[0].set_xlabel("seed")
    axes[0].legend()
    axes[1].plot(s, [r[2] for r in rows], "o", label="a_hat(B)")
    bound = seeds[0].get("a_bound") if seeds else None
    if bound is not None:
        axes[1].axhline(bound, color="k", ls="--", label="a + MCc")
    axes[1].set_xlabel("seed")
    axes[1].legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
