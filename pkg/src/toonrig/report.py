"""Delimited tables and matplotlib figures for the ``--report-dir`` option."""
import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def write_table(rows, header, path):
    """CSV, or TSV when ``path`` ends in .tsv."""
    path = Path(path)
    delim = "\t" if path.suffix == ".tsv" else ","
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delim, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def loss_report(history, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    table = write_table(history.rows(), ("epoch", "train_mse", "val_mse", "learning_rate"), d / "loss.csv")
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = range(1, len(history.train) + 1)
    ax.semilogy(epochs, history.train, label="train")
    ax.semilogy(epochs, history.validation, label="validation")
    ax.axvline(history.best_epoch, color="grey", ls=":", label=f"best ({history.best_epoch})")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE (weights / 30)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(d / "loss.png", dpi=100)
    plt.close(fig)
    return [table, d / "loss.png"]


def timing_report(timings, directory):
    """``timings`` is an ordered list of (stage, seconds)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    table = write_table([(k, f"{v:.4f}") for k, v in timings], ("stage", "seconds"), d / "timing.csv")
    fig, ax = plt.subplots(figsize=(6, 3))
    names = [k for k, _ in timings]
    ax.barh(names[::-1], [v for _, v in timings][::-1])
    ax.set_xlabel("seconds")
    fig.tight_layout()
    fig.savefig(d / "timing.png", dpi=100)
    plt.close(fig)
    return [table, d / "timing.png"]


def params_report(params, component_ids, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rows = [(c, f"{params[(c, 'x')]:.4f}", f"{params[(c, 'y')]:.4f}", f"{params[(c, 'scale')]:.4f}")
            for c in component_ids]
    return [write_table(rows, ("component", "x", "y", "scale"), d / "params.csv")]
