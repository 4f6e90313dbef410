"""Static SVG charts drawn from the ablation and sweep CSVs."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed ids and no timestamp, so identical CSVs give identical SVGs
plt.rcParams["svg.hashsalt"] = "epic"
_META = {"Date": None}

_LABELS = {"baseline": "Baseline", "ptuning": "P-tuning", "linear": "Linear", "epic": "EPIC"}


def _read(path: str | Path) -> list[dict[str, str]]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def ablation_svg(csv_path: str | Path, out_path: str | Path) -> Path:
    """Accuracy bars per mode, next to trainable parameters and saved activations."""
    rows = _read(csv_path)
    modes = [r["mode"] for r in rows]
    names = [_LABELS.get(m, m) for m in modes]
    means = [100 * float(r["mean"]) for r in rows]
    stds = [100 * float(r["std"]) for r in rows]

    fig, axes = plt.subplots(1, 3, figsize=(11, 3.4))
    axes[0].bar(names, means, yerr=stds, capsize=3, color="#4c72b0")
    axes[0].set_ylabel(f"test {rows[0]['metric']} (%)")
    lo = min(m - s for m, s in zip(means, stds))
    axes[0].set_ylim(max(0.0, lo - 5), 100)
    for ax, key, title in ((axes[1], "trainable_params", "trainable parameters"),
                           (axes[2], "activation_floats", "floats saved for backward")):
        vals = [float(r[key]) if r.get(key) else 0.0 for r in rows]
        ax.bar(names, vals, color="#dd8452")
        ax.set_title(title)
    for ax in axes:
        ax.tick_params(axis="x", labelrotation=20)
    fig.tight_layout()
    out = Path(out_path)
    fig.savefig(out, format="svg", metadata=_META)
    plt.close(fig)
    return out


def sweep_svg(csv_path: str | Path, out_path: str | Path) -> Path:
    """One panel per layer interval, one line per similarity family."""
    rows = _read(csv_path)
    intervals = sorted({int(r["interval"]) for r in rows})
    fig, axes = plt.subplots(1, len(intervals), figsize=(4.5 * len(intervals), 3.4),
                             squeeze=False)
    for ax, interval in zip(axes[0], intervals):
        sub = [r for r in rows if int(r["interval"]) == interval]
        layer_sets = list(dict.fromkeys(r["layers"] for r in sub))
        for sim in dict.fromkeys(r["similarity"] for r in sub):
            pts = {r["layers"]: r for r in sub if r["similarity"] == sim}
            xs = [i for i, ls in enumerate(layer_sets) if ls in pts]
            ys = [100 * float(pts[layer_sets[i]]["mean"]) for i in xs]
            es = [100 * float(pts[layer_sets[i]]["std"]) for i in xs]
            ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3, label=sim)
        ax.set_xticks(range(len(layer_sets)))
        ax.set_xticklabels(["(" + ls.replace("-", ",") + ")" for ls in layer_sets])
        ax.set_xlabel("interaction layers")
        ax.set_title(f"interval {interval}" if interval else "single layer")
        ax.set_ylabel("test metric (%)")
        ax.legend(fontsize=8)
    fig.tight_layout()
    out = Path(out_path)
    fig.savefig(out, format="svg", metadata=_META)
    plt.close(fig)
    return out
