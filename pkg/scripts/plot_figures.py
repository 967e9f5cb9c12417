"""Plot the CSV outputs of ``mfbelavkin run``.

Usage: python3 scripts/plot_figures.py <run-dir> [<run-dir> ...]

Each run directory is recognised by the files it contains (reduction, stabilization,
chaos-scaling or picard-vs-particles) and a PNG is written next to the CSVs.
matplotlib is needed here only; the package itself does not import it.
"""

import sys
from pathlib import Path

import numpy as np

from mfbelavkin.sde import read_csv

try:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
except ImportError:
    sys.exit("plot_figures.py needs matplotlib (pip install matplotlib)")


def column(path, name):
    names, data = read_csv(path)
    return data[:, names.index(name)]


def plot_reduction(run: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for p in sorted(run.glob("reduction_*_[0-9][0-9][0-9].csv")):
        ax.plot(column(p, "time"), column(p, "z"), lw=0.7)
    summary = run / "summary_mean_z.csv"
    ax.plot(column(summary, "time"), column(summary, "mean_z"), "k", lw=2, label="ensemble mean")
    ax.set(xlabel="t", ylabel="z", ylim=(-1.05, 1.05))
    ax.legend()
    return save(fig, run / "reduction.png")


def plot_stabilization(run: Path) -> Path:
    names, data = read_csv(run / "fidelity_paths.csv")
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(data[:, 0], data[:, 1:], lw=0.5, alpha=0.4)
    summary = run / "summary_mean_fidelity.csv"
    ax.plot(column(summary, "time"), column(summary, "mean_fidelity"), "k", lw=2, label="mean fidelity")
    ax.set(xlabel="t", ylabel="fidelity to target", ylim=(0, 1.02))
    ax.legend()
    return save(fig, run / "stabilization.png")


def plot_chaos(run: Path) -> Path:
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for p in sorted(run.glob("chaos_N*.csv"), key=lambda q: int(q.stem[7:])):
        t, a, se = column(p, "time"), column(p, "mean_alpha"), column(p, "se_alpha")
        ax.plot(t, a, label=p.stem[6:])
        ax.fill_between(t, a - 2 * se, a + 2 * se, alpha=0.2)
    ax.set(xlabel="t", ylabel="E[alpha_N(t)]")
    ax.legend()
    final = run / "chaos_final.csv"
    N, a = column(final, "N"), column(final, "mean_alpha_T")
    slope, intercept = column(run / "chaos_fit.csv", "slope")[0], column(run / "chaos_fit.csv", "intercept")[0]
    ax2.loglog(N, a, "o")
    ax2.loglog(N, np.exp(intercept) * N**slope, "--", label=f"slope {slope:.2f}")
    ax2.set(xlabel="N", ylabel="E[alpha_N(T)]")
    ax2.legend()
    return save(fig, run / "chaos.png")


def plot_picard(run: Path) -> Path:
    cmp = run / "comparison.csv"
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(column(cmp, "time"), column(cmp, "distance"), label="particles vs Picard")
    ax.plot(column(cmp, "time"), column(cmp, "bound"), "--", label="tolerance bound")
    ax.set(xlabel="t", ylabel="Frobenius distance")
    ax.legend()
    return save(fig, run / "picard.png")


def save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


PLOTTERS = [
    ("summary_mean_z.csv", plot_reduction),
    ("summary_mean_fidelity.csv", plot_stabilization),
    ("chaos_fit.csv", plot_chaos),
    ("comparison.csv", plot_picard),
]


def main(argv) -> int:
    if not argv:
        print(__doc__)
        return 2
    for arg in argv:
        run = Path(arg)
        plotters = [f for marker, f in PLOTTERS if (run / marker).exists()]
        if not plotters:
            print(f"{run}: nothing to plot")
        for f in plotters:
            print(f"wrote {f(run)}")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
