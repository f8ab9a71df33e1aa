import argparse
import sys
from pathlib import Path

import matplotlib.pyplot as plt
import pandas as pd

from sparse_view_recon.metrics_eval import METRICS


def load_csv(path):
    try:
        df = pd.read_csv(path)
        print(f"Loaded {path}")
        print(df.head(5))
        return df
    except FileNotFoundError:
        print(f"Error: CSV file not found: {path}")
        sys.exit(1)
    except Exception as e:
        print(f"Error reading CSV file: {e}")
        sys.exit(1)


def create_argument_parser():
    parser = argparse.ArgumentParser(
        description="Plot reconstruction and denoising outputs",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Loss trace and metrics of a reconstruction run
  python demo/plot_results.py --run runs/reconstruct_full

  # Compare several runs' metrics side by side
  python demo/plot_results.py --run runs/reconstruct_full --run runs/reconstruct_no_completion

  # Masked-region error along the denoising trajectory
  python demo/plot_results.py --denoise denoise/full --denoise denoise/no_guiding
        """
    )
    parser.add_argument("--run", action="append", default=[], help="Reconstruction output directory")
    parser.add_argument("--denoise", action="append", default=[], help="denoise-demo output directory")
    parser.add_argument("--save", type=str, default=None, help="Write the figure instead of showing it")
    return parser


def plot_loss_traces(ax, runs):
    for run in runs:
        trace = load_csv(Path(run) / "loss_trace.csv")
        # smooth over a window of views so cycles stand out
        smoothed = trace["loss"].rolling(50, min_periods=1).mean()
        ax.plot(trace["iteration"], smoothed, label=Path(run).name)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_title("Training loss")
    ax.legend()
    ax.grid(True, alpha=0.3)


def plot_metrics(ax, runs):
    frames = []
    for run in runs:
        df = load_csv(Path(run) / "metrics.csv")
        df["scene"] = Path(run).name
        frames.append(df)
    table = pd.concat(frames, ignore_index=True).set_index("scene")
    column = METRICS["cd"]
    table[column].plot.bar(ax=ax, rot=30)
    ax.set_ylabel(column)
    ax.set_title("Chamfer distance")
    ax.grid(True, axis="y", alpha=0.3)


def plot_denoise(ax, folders):
    for folder in folders:
        trace = load_csv(Path(folder) / "trace.csv")
        mean = trace.groupby("t", sort=False)["masked_mse"].mean()
        ax.plot(mean.index, mean.values, marker="o", markersize=2, label=trace["mode"].iloc[0])
    ax.invert_xaxis()
    ax.set_yscale("log")
    ax.set_xlabel("t")
    ax.set_ylabel("masked MSE")
    ax.set_title("Guided denoising")
    ax.legend()
    ax.grid(True, alpha=0.3)


def main():
    parser = create_argument_parser()
    args = parser.parse_args()

    panels = []
    if args.run:
        panels += [lambda ax: plot_loss_traces(ax, args.run), lambda ax: plot_metrics(ax, args.run)]
    if args.denoise:
        panels.append(lambda ax: plot_denoise(ax, args.denoise))
    if not panels:
        parser.error("Nothing to plot: pass --run and/or --denoise")

    fig, axes = plt.subplots(1, len(panels), figsize=(6 * len(panels), 5))
    if len(panels) == 1:
        axes = [axes]
    for ax, panel in zip(axes, panels):
        panel(ax)
    plt.tight_layout()

    if args.save:
        fig.savefig(args.save, dpi=120)
        print(f"Saved figure to {args.save}")
    else:
        plt.show()


if __name__ == "__main__":
    main()
