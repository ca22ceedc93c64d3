"""Report figures (matplotlib, headless)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .signal import FrameSpec, stft  # noqa: E402


def plot_dsr(aggregates, path) -> str:
    """Grouped bars: one group per (defense, protect, verifier), one bar per enhancement."""
    groups, enhancements = [], []
    for row in aggregates:
        g = (row["defense"], row["protect"], row["verifier"])
        if g not in groups:
            groups.append(g)
        if row["enhancement"] not in enhancements:
            enhancements.append(row["enhancement"])
    values = {(row["defense"], row["protect"], row["verifier"], row["enhancement"]): row["dsr"] for row in aggregates}
    width = 0.8 / max(len(enhancements), 1)
    x = np.arange(len(groups))
    fig, ax = plt.subplots(figsize=(max(6.0, 1.1 * len(groups) + 2), 4.0))
    for k, enh in enumerate(enhancements):
        ys = [values.get(g + (enh,), np.nan) for g in groups]
        ax.bar(x + (k - (len(enhancements) - 1) / 2) * width, ys, width, label=enh)
    ax.set_xticks(x)
    ax.set_xticklabels([f"{d}\n{p}\nverifier {v}" for d, p, v in groups], fontsize=7)
    ax.set_ylabel("DSR (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=7, title="enhancement", title_fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return str(path)


def plot_spectrograms(examples: dict, path, frame_spec: FrameSpec = FrameSpec()) -> str:
    """Log-magnitude spectrograms of the example waveforms stacked vertically."""
    names = sorted(examples)
    fig, axes = plt.subplots(len(names), 1, figsize=(7.0, 1.8 * len(names) + 0.4), squeeze=False)
    for ax, name in zip(axes[:, 0], names):
        wav = examples[name]
        mag = stft(wav, frame_spec).magnitude
        img = 20.0 * np.log10(np.maximum(mag, 1e-8)).T
        t_max = mag.shape[0] * frame_spec.hop / wav.sample_rate
        ax.imshow(img, origin="lower", aspect="auto", cmap="magma", extent=(0, t_max, 0, wav.sample_rate / 2),
                  vmin=img.max() - 80, vmax=img.max())
        ax.set_title(name, fontsize=8)
        ax.set_ylabel("Hz", fontsize=7)
        ax.tick_params(labelsize=6)
    axes[-1, 0].set_xlabel("s", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return str(path)
