"""Report figures written straight to image files (non-interactive backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from . import data as D  # noqa: E402

_CONF = "#222222"
_PALETTE = ("#d9a21b", "#2b6cb0", "#2f855a")


def _save(fig, path) -> str:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return str(path)


def days_histogram(conf: D.ConfidentialTable, tables, path, bin_width: int = 25, label: str = "synthetic") -> str:
    """Confidential vs pooled-synthetic AvailableDays histograms."""
    bins = np.arange(0, D.MAX_DAYS + bin_width + 1, bin_width)
    fig, ax = plt.subplots(figsize=(6, 4))
    syn = np.concatenate([t.days for t in tables])
    ax.hist(conf.days, bins=bins, density=True, histtype="step", color=_CONF, lw=2, label="confidential")
    ax.hist(syn, bins=bins, density=True, histtype="step", color=_PALETTE[0], lw=2, label=label)
    ax.set_xlabel("AvailableDays")
    ax.set_ylabel("density")
    ax.legend()
    return _save(fig, path)


def price_density(conf: D.ConfidentialTable, tables, path, label: str = "synthetic", bins: int = 60) -> str:
    """Confidential vs pooled-synthetic log price densities."""
    lc = np.log(conf.price)
    ls = np.log(np.concatenate([t.price for t in tables]))
    edges = np.linspace(min(lc.min(), ls.min()), max(lc.max(), ls.max()), bins + 1)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(lc, bins=edges, density=True, histtype="step", color=_CONF, lw=2, label="confidential")
    ax.hist(ls, bins=edges, density=True, histtype="step", color=_PALETTE[0], lw=2, label=label)
    ax.set_xlabel("log Price")
    ax.set_ylabel("density")
    ax.legend()
    return _save(fig, path)


def interval_panels(frame: pd.DataFrame, path, kind: str = "estimand") -> str:
    """Point estimates and 95% intervals per target, one panel each.

    ``frame`` is the tidy interval table; an optional ``method`` column adds
    one synthetic bar per method.
    """
    sub = frame[frame["kind"] == kind]
    targets = list(dict.fromkeys(zip(sub["variable"], sub["target"])))
    if not targets:
        raise ValueError(f"no {kind} rows to plot")
    ncol = min(3, len(targets))
    nrow = int(np.ceil(len(targets) / ncol))
    fig, axes = plt.subplots(nrow, ncol, figsize=(3.4 * ncol, 3.2 * nrow), squeeze=False)
    for ax, (var, tgt) in zip(axes.ravel(), targets):
        rows = sub[(sub["variable"] == var) & (sub["target"] == tgt)]
        conf = rows[rows["source"] == "confidential"].iloc[0]
        bars = [("confidential", conf, _CONF)]
        syn = rows[rows["source"] == "synthetic"]
        for k, (_, r) in enumerate(syn.iterrows()):
            bars.append((r.get("method", "synthetic"), r, _PALETTE[k % len(_PALETTE)]))
        for x, (name, r, color) in enumerate(bars):
            ax.errorbar([x], [r["point"]], yerr=[[r["point"] - r["lower"]], [r["upper"] - r["point"]]],
                        fmt="s", color=color, capsize=4)
        ax.set_xticks(range(len(bars)), [b[0] for b in bars], fontsize=8)
        title = f"{var}: {tgt}" if kind == "estimand" else tgt
        overlaps = ", ".join("n/a" if np.isnan(r["overlap"]) else f"{r['overlap']:.2f}" for _, r, _ in bars[1:])
        ax.set_title(f"{title}\nI = {overlaps}", fontsize=9)
    for ax in axes.ravel()[len(targets):]:
        ax.set_visible(False)
    return _save(fig, path)


def sweep_panels(frame: pd.DataFrame, path) -> str:
    """EMR, TMR, FMR and u against the intruder-knowledge noise level S."""
    fig, axes = plt.subplots(2, 2, figsize=(8, 6))
    group_col = "method" if "method" in frame.columns else None
    for ax, metric in zip(axes.ravel(), ("EMR", "TMR", "FMR", "u")):
        for k, (key, rows) in enumerate(frame.groupby(["dataset"] + ([group_col] if group_col else []))):
            key = key if isinstance(key, tuple) else (key,)
            name = key[-1] if key[0] == "synthetic" and len(key) > 1 else key[0]
            color = _CONF if rows["dataset"].iloc[0] == "confidential" else _PALETTE[k % len(_PALETTE)]
            ax.plot(rows["S"], rows[metric], marker="o", ms=3, color=color, label=name)
        ax.set_xlabel("S")
        ax.set_title(metric)
    axes[0, 0].legend(fontsize=8)
    return _save(fig, path)
