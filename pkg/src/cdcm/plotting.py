"""Deterministic figure output (no timestamps or version stamps)."""

from pathlib import Path


def save_figure(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    suffix = path.suffix.lower()
    if suffix == ".svg":
        import matplotlib

        matplotlib.rcParams["svg.hashsalt"] = "cdcm"
        fig.savefig(path, metadata={"Date": None, "Creator": None})
    elif suffix == ".png":
        fig.savefig(path, metadata={"Software": None})
    else:
        fig.savefig(path)
    return path
