"""Short dumbbell flow with plots of the energy, the step lengths and a few snapshots."""

import argparse
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from msflow.config.flow_config import FlowConfig  # noqa: E402
from msflow.config.logging_system import setup_logger  # noqa: E402
from msflow.getters.shapes import make_init  # noqa: E402
from msflow.pipeline import diagnostics  # noqa: E402
from msflow.pipeline.jko import FlowLedger, run_flow  # noqa: E402


def plot_ledger(ledger: FlowLedger, out_path: str) -> None:
    """
    Plots total energy and step length against time.

    Args:
        ledger (FlowLedger): Finished run.
        out_path (str): PNG file to write.
    """
    frame = ledger.to_frame()
    fig, (ax_e, ax_w) = plt.subplots(1, 2, figsize=(10, 4))
    ax_e.plot(frame["t"], frame["total_energy"], marker="o", ms=3)
    ax_e.set_xlabel("t")
    ax_e.set_ylabel("energy")
    ax_e.set_title("Energy dissipation")
    ax_w.semilogy(frame["t"].iloc[1:], frame["w2_step"].iloc[1:], marker="o", ms=3)
    ax_w.set_xlabel("t")
    ax_w.set_ylabel("W2(E_{n-1}, E_n)")
    ax_w.set_title("Step lengths")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_snapshots(ledger: FlowLedger, out_path: str, n_panels: int = 4) -> None:
    """
    Plots evenly spaced states of the run side by side.

    Args:
        ledger (FlowLedger): Finished run.
        out_path (str): PNG file to write.
        n_panels (int): Number of states shown.
    """
    last = ledger.n_steps
    picks = sorted({round(k * last / max(n_panels - 1, 1)) for k in range(n_panels)})
    fig, axes = plt.subplots(1, len(picks), figsize=(3 * len(picks), 3))
    axes = [axes] if len(picks) == 1 else axes
    grid = ledger.config.grid()
    x0, y0 = (c - grid.cell_size / 2 for c in grid.origin)
    extent = (x0, x0 + grid.nx * grid.cell_size, y0, y0 + grid.ny * grid.cell_size)
    for ax, n in zip(axes, picks):
        ax.imshow(ledger.states[n].values.T, origin="lower", extent=extent, cmap="Greys")
        ax.set_title(f"n = {n}, t = {ledger.records[n].t:.3g}")
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="demo_output", help="directory for plots and logs")
    parser.add_argument("--steps", type=int, default=10)
    args = parser.parse_args()

    os.makedirs(args.out, exist_ok=True)
    logger = setup_logger(args.out)
    cfg = FlowConfig(h=0.02, n_steps=args.steps, nx=64, ny=64, cell_size=0.05)
    ledger = run_flow(make_init("dumbbell", cfg.grid()), cfg)

    report = diagnostics.check_flow(ledger)
    logger.info(f"checks failed: {report.failed_checks() or 'none'}")

    plot_ledger(ledger, os.path.join(args.out, "energy.png"))
    plot_snapshots(ledger, os.path.join(args.out, "snapshots.png"))
    logger.info(f"plots written to {args.out}")


if __name__ == "__main__":
    main()
