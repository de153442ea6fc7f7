"""PNG figures for experiment outputs; always rendered with the Agg backend."""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps PNG bytes stable across reruns
_META = {"Software": None}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def plot_fig1a(terms: dict, path) -> None:
    names = list(terms)
    vals = [terms[n] for n in names]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(names, vals, color=["tab:red", "tab:blue", "tab:green", "tab:purple"][: len(names)])
    ax.set_yscale("log")
    ax.set_ylabel("capacity term")
    _save(fig, path)


def plot_fig1b(rows: Sequence[Sequence[float]], path) -> None:
    r = np.asarray(rows, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(r[:, 0], r[:, 1], "rD-", label="train acc")
    ax.plot(r[:, 0], r[:, 2], "bx-", label="test acc")
    ax.plot(r[:, 0], r[:, 3], "k.--", label="gap")
    ax.set_xlabel("filter norm scale")
    ax.legend()
    _save(fig, path)


def plot_fig1c(rows: Sequence[Sequence[float]], path) -> None:
    r = np.asarray(rows, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(r[:, 0], r[:, 3], "o-", label="log B_jac")
    ax.plot(r[:, 0], r[:, 4], "s-", label="log prod ||W_d||")
    ax.plot(r[:, 0], r[:, 5], ":", label="log d")
    ax.plot(r[:, 0], r[:, 6], "--", label="log d^2")
    ax.set_xlabel("depth")
    ax.legend()
    _save(fig, path)


def plot_fig2(rows: Sequence[Sequence[float]], path) -> None:
    r = np.asarray(rows, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    bins = max(5, int(np.sqrt(len(r))))
    ax.hist(r[:, 3], bins=bins, alpha=0.6, label="log10 B_jac")
    ax.hist(r[:, 4], bins=bins, alpha=0.6, label="log10 prod ||W_d||")
    ax.legend()
    _save(fig, path)


def plot_history(history, path) -> None:
    ep = [h["epoch"] for h in history]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(ep, [h["loss"] for h in history], label="loss")
    ax.plot(ep, [h["train_acc"] for h in history], label="train acc")
    ax.set_xlabel("epoch")
    ax.legend()
    _save(fig, path)
