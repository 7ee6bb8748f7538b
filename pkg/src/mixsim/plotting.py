"""Figures written next to the CSV outputs (``--plot``).

Uses the Agg backend so it works headless.  Each function takes the same
objects the CSV writers take and returns the PNG path.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
}

FIELD_LABELS = (r"$\tilde\rho_1$ [veh/m]", r"$\tilde v_1$ [m/s]",
                r"$\tilde\rho_2$ [veh/m]", r"$\tilde v_2$ [m/s]")


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_trace(trace, path, title=None) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(3, 1, figsize=(6, 6), sharex=True)
        ax[0].semilogy(trace.t, np.maximum(trace.l2, 1e-300))
        ax[0].set_ylabel(r"$\|z\|_{L^2}$")
        ax[1].plot(trace.t, trace.U, lw=0.8)
        ax[1].set_ylabel("U [veh/s]")
        ax[2].step(trace.t, trace.mode_index + 1, where="post", lw=0.6)
        ax[2].set_ylabel("mode")
        ax[2].set_xlabel("t [s]")
        if title:
            ax[0].set_title(title)
        return _save(fig, path)


def plot_snapshots(trace, path) -> Path:
    """Space-time maps of the four deviation fields."""
    Z = np.array(trace.snapshots)  # (nt, n, 4)
    t = np.asarray(trace.snapshot_t)
    with plt.rc_context(RC):
        fig, axes = plt.subplots(2, 2, figsize=(8, 5.5), sharex=True, sharey=True)
        for k, ax in enumerate(axes.flat):
            lim = float(np.max(np.abs(Z[:, :, k]))) or 1.0
            im = ax.pcolormesh(trace.x, t, Z[:, :, k], cmap="RdBu_r", vmin=-lim, vmax=lim,
                               shading="nearest")
            fig.colorbar(im, ax=ax, label=FIELD_LABELS[k])
        for ax in axes[1]:
            ax.set_xlabel("x [m]")
        for ax in axes[:, 0]:
            ax.set_ylabel("t [s]")
        return _save(fig, path)


def plot_probability(ptrace, p0, states, path) -> Path:
    m = ptrace.marginals(p0)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for k, s in enumerate(states):
            ax.plot(ptrace.t_grid, m[:, k], label=f"s2 = {s:g} m")
        ax.set_xlabel("t [s]")
        ax.set_ylabel("probability")
        ax.legend(ncol=2)
        return _save(fig, path)


def plot_ensemble(result, path) -> Path:
    t, m, s = result.t_grid, result.mean_sq, result.stderr
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.semilogy(t, np.maximum(m, 1e-300), label="mean square")
        lo = np.maximum(m - 2 * s, 1e-300)
        ax.fill_between(t, lo, m + 2 * s, alpha=0.3, lw=0)
        if np.isfinite(result.fitted_zeta):
            ax.semilogy(t, result.prefactor * np.exp(-result.fitted_zeta * t), "k--", lw=0.8,
                        label=f"fit, rate {result.fitted_zeta:.3g} 1/s")
            for w in result.window:
                ax.axvline(w, color="0.6", lw=0.5)
        ax.set_xlabel("t [s]")
        ax.set_ylabel(r"$E\|z\|^2$")
        ax.legend()
        return _save(fig, path)


def plot_kernels(kernels, path) -> Path:
    xg = np.linspace(0.0, kernels.L, kernels.n + 1)
    X, XI = np.meshgrid(xg, xg, indexing="ij")
    mask = XI > X
    names = ("k1", "k2", "k3", "n")
    fields = [kernels.K[0], kernels.K[1], kernels.K[2], kernels.N]
    with plt.rc_context(RC):
        fig, axes = plt.subplots(2, 2, figsize=(8, 6.5))
        for ax, F, name in zip(axes.flat, fields, names):
            im = ax.pcolormesh(xg, xg, np.ma.masked_where(mask, F).T, shading="nearest")
            fig.colorbar(im, ax=ax)
            ax.set_title(name)
            ax.set_xlabel("x [m]")
            ax.set_ylabel(r"$\xi$ [m]")
        return _save(fig, path)
