"""Matplotlib renderers for the report path.

Figures are written as PNG with stripped metadata so reruns of the same
config produce byte-identical files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

_SAVE = dict(dpi=130, metadata={"Software": None})


def _new_axes(xlabel, ylabel):
    fig, ax = plt.subplots(figsize=(5.2, 3.4), constrained_layout=True)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    return fig, ax


def _finish(fig, path):
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def render_energy(path, times, state_sq, curv_sq):
    fig, ax = _new_axes("t", "mean-square norm")
    ax.plot(times, state_sq, "o-", ms=3, label="state")
    ax.plot(times, curv_sq, "s--", ms=3, label="second derivative")
    if max(state_sq) > 0 or max(curv_sq) > 0:
        ax.set_yscale("log")
    ax.legend(frameon=False)
    _finish(fig, path)


def render_decay(path, epsilons, terminal_sq, control_sq):
    fig, ax = _new_axes("penalty epsilon", "mean-square terminal state")
    ax.set_xscale("log")
    ax.plot(epsilons, terminal_sq, "o-", ms=4, label="terminal")
    if max(terminal_sq) > 0:
        ax.set_yscale("log")
    ax2 = ax.twinx()
    ax2.plot(epsilons, control_sq, "s--", ms=4, color="tab:red",
             label="control effort")
    if max(control_sq) > 0:
        ax2.set_yscale("log")
    ax2.set_ylabel("squared control norm")
    ax.invert_xaxis()
    handles = ax.get_lines() + ax2.get_lines()
    ax.legend(handles, [h.get_label() for h in handles], frameon=False)
    _finish(fig, path)


def render_residual_trace(path, residuals):
    fig, ax = _new_axes("iteration", "fixed-point residual")
    ax.plot(range(1, len(residuals) + 1), residuals, "o-", ms=3)
    if max(residuals) > 0:
        ax.set_yscale("log")
    _finish(fig, path)


def render_histogram(path, values, xlabel):
    fig, ax = _new_axes(xlabel, "count")
    ax.hist(values, bins=min(30, max(5, len(values) // 4)), color="tab:blue",
            alpha=0.8)
    _finish(fig, path)


def render_profile(path, x, values, ylabel):
    fig, ax = _new_axes("x", ylabel)
    ax.plot(x, values, "-")
    _finish(fig, path)


def render_weights(path, times, gamma, gamma_bar):
    fig, ax = _new_axes("t", "blow-up factor")
    ax.semilogy(times, gamma, "-", label="two-sided")
    ax.semilogy(times, gamma_bar, "--", label="one-sided")
    ax.legend(frameon=False)
    _finish(fig, path)
