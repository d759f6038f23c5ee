"""Friedman omnibus test and Bonferroni-Dunn comparison against a control.

Treatments (e.g. losses) are ranked within each block (e.g. normal class),
with rank 1 for the best score and average ranks on ties. The Friedman
statistic uses the chi-square approximation with k - 1 degrees of freedom.
The post-hoc critical difference is

    CD = q_alpha * sqrt(k (k + 1) / (6 N)),

where q_alpha is the two-sided standard-normal quantile at alpha / (k - 1)
(Bonferroni correction over the k - 1 comparisons with the control).
"""

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.stats import chi2, norm, rankdata

from .errors import ConfigurationError


@dataclass
class ScoreMatrix:
    values: np.ndarray  # (N blocks, k treatments)
    treatments: list
    blocks: list

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        n, k = self.values.shape if self.values.ndim == 2 else (0, 0)
        if self.values.ndim != 2 or n < 2 or k < 2:
            raise ConfigurationError("score matrix needs at least 2 blocks and 2 treatments")
        if np.isnan(self.values).any():
            rows, cols = np.nonzero(np.isnan(self.values))
            holes = ", ".join(f"({self.blocks[r]}, {self.treatments[c]})" for r, c in zip(rows, cols))
            raise ConfigurationError(f"missing entries: {holes}")
        if len(self.treatments) != k or len(self.blocks) != n:
            raise ConfigurationError("treatment/block names do not match the matrix shape")

    @classmethod
    def from_csv(cls, path, block_column=None):
        """Read a CSV with one row per block and one column per treatment.

        The first column (or ``block_column``) names the block.
        """
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], [r for r in rows[1:] if r and not r[0].startswith("#")]
        bcol = 0 if block_column is None else header.index(block_column)
        tcols = [i for i in range(len(header)) if i != bcol]
        treatments = [header[i] for i in tcols]
        blocks, values, holes = [], [], []
        for r in body:
            blocks.append(r[bcol])
            row = []
            for i in tcols:
                cell = r[i].strip() if i < len(r) else ""
                if cell == "":
                    holes.append(f"({r[bcol]}, {header[i]})")
                    row.append(np.nan)
                else:
                    row.append(float(cell))
            values.append(row)
        if holes:
            raise ConfigurationError(f"missing entries: {', '.join(holes)}")
        return cls(np.array(values), treatments, blocks)


@dataclass
class RankSummary:
    treatments: list
    ranks: np.ndarray  # (N, k)
    rank_sums: np.ndarray
    average_ranks: np.ndarray
    n_blocks: int
    statistic: float
    p_value: float
    tied_blocks: list = field(default_factory=list)
    alpha: Optional[float] = None
    q_alpha: Optional[float] = None
    cd: Optional[float] = None
    control: Optional[int] = None
    significant_vs_control: Optional[list] = None

    @property
    def k(self):
        return len(self.treatments)

    def to_dict(self):
        return {
            "treatments": list(self.treatments),
            "rank_sums": self.rank_sums.tolist(),
            "average_ranks": self.average_ranks.tolist(),
            "n_blocks": self.n_blocks,
            "friedman_chi2": self.statistic,
            "p_value": self.p_value,
            "tied_blocks": list(self.tied_blocks),
            "alpha": self.alpha,
            "q_alpha": self.q_alpha,
            "critical_difference": self.cd,
            "control": None if self.control is None else self.treatments[self.control],
            "significant_vs_control": None
            if self.significant_vs_control is None
            else dict(zip(self.treatments, self.significant_vs_control)),
        }


def rank_within_blocks(values, higher_is_better=True):
    v = np.asarray(values, dtype=np.float64)
    return np.vstack([rankdata(-row if higher_is_better else row, method="average") for row in v])


def friedman_test(m: ScoreMatrix, higher_is_better=True):
    """Returns ``(statistic, p_value, RankSummary)``."""
    ranks = rank_within_blocks(m.values, higher_is_better)
    n, k = ranks.shape
    rank_sums = ranks.sum(axis=0)
    stat = 12.0 / (n * k * (k + 1)) * float(np.sum(rank_sums**2)) - 3.0 * n * (k + 1)
    stat = max(stat, 0.0)
    p = float(chi2.sf(stat, k - 1))
    tied = [m.blocks[i] for i in range(n) if len(np.unique(m.values[i])) < k]
    summary = RankSummary(
        treatments=list(m.treatments),
        ranks=ranks,
        rank_sums=rank_sums,
        average_ranks=rank_sums / n,
        n_blocks=n,
        statistic=float(stat),
        p_value=p,
        tied_blocks=tied,
    )
    return summary.statistic, summary.p_value, summary


def critical_difference(k, n, alpha=0.05):
    """``(q_alpha, CD)`` for the Bonferroni-Dunn test with k treatments, N blocks."""
    if not 0 < alpha < 1:
        raise ConfigurationError("alpha must be in (0, 1)")
    q = float(norm.ppf(1.0 - alpha / (2.0 * (k - 1))))
    return q, q * np.sqrt(k * (k + 1) / (6.0 * n))


def bonferroni_dunn(r: RankSummary, alpha=0.05, control=0) -> RankSummary:
    """Complete ``r`` with CD and per-treatment significance versus ``control``.

    ``control`` is a treatment index or name.
    """
    if isinstance(control, str):
        control = r.treatments.index(control)
    q, cd = critical_difference(r.k, r.n_blocks, alpha)
    gaps = np.abs(r.average_ranks - r.average_ranks[control])
    sig = [bool(g > cd) for g in gaps]
    sig[control] = False
    return replace(r, alpha=alpha, q_alpha=q, cd=float(cd), control=int(control), significant_vs_control=sig)


def cd_table(r: RankSummary) -> str:
    lines = [f"{'treatment':<16}{'avg rank':>10}{'gap':>8}  vs control"]
    order = np.argsort(r.average_ranks, kind="stable")
    for j in order:
        gap = abs(r.average_ranks[j] - r.average_ranks[r.control])
        if j == r.control:
            verdict = "control"
        else:
            verdict = "significant" if r.significant_vs_control[j] else "not significant"
        lines.append(f"{r.treatments[j]:<16}{r.average_ranks[j]:>10.3f}{gap:>8.3f}  {verdict}")
    lines.append(f"CD = {r.cd:.4f} (alpha = {r.alpha}, q = {r.q_alpha:.4f}, k = {r.k}, N = {r.n_blocks})")
    return "\n".join(lines)


def cd_layout(r: RankSummary):
    """Geometry of the diagram: marker positions, CD bar, control connectors."""
    if r.cd is None:
        raise ConfigurationError("run bonferroni_dunn before drawing the diagram")
    positions = {t: float(a) for t, a in zip(r.treatments, r.average_ranks)}
    ctrl = r.treatments[r.control]
    connected = [t for j, t in enumerate(r.treatments) if j != r.control and not r.significant_vs_control[j]]
    return {"positions": positions, "cd_bar": (1.0, 1.0 + r.cd), "control": ctrl, "connected": connected}


def cd_diagram(r: RankSummary, path=None):
    """Render the critical-difference diagram; returns ``(layout, table)``.

    When ``path`` is given the figure is written there (PNG or SVG).
    """
    layout = cd_layout(r)
    table = cd_table(r)
    if path is not None:
        _draw(r, layout, path)
    return layout, table


def _draw(r, layout, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .plotting import save_figure

    k = r.k
    fig, ax = plt.subplots(figsize=(7, 1.2 + 0.35 * k))
    ax.set_xlim(0.5, k + 0.5)
    ax.set_ylim(-k - 1, 2)
    ax.hlines(0, 1, k, color="black")
    for t in range(1, k + 1):
        ax.vlines(t, -0.1, 0.1, color="black")
        ax.text(t, 0.3, str(t), ha="center", fontsize=9)
    lo, hi = layout["cd_bar"]
    ax.hlines(1.2, lo, hi, color="black", linewidth=2)
    ax.text((lo + hi) / 2, 1.4, f"CD = {r.cd:.3f}", ha="center", fontsize=9)
    order = sorted(layout["positions"].items(), key=lambda kv: (kv[1], kv[0]))
    for i, (name, pos) in enumerate(order):
        y = -(i + 1) * 0.8
        ax.vlines(pos, y, 0, color="gray", linewidth=0.8)
        ax.plot([pos], [0], "o", color="black", markersize=4)
        ax.text(pos + 0.05, y, f"{name} ({pos:.2f})", va="center", fontsize=9)
    cpos = layout["positions"][layout["control"]]
    for name in layout["connected"]:
        ax.hlines(-0.35, min(cpos, layout["positions"][name]), max(cpos, layout["positions"][name]), color="red", linewidth=3)
    ax.axis("off")
    save_figure(fig, path)
    plt.close(fig)


def write_summary(r: RankSummary, path):
    Path(path).write_text(json.dumps(r.to_dict(), indent=2, sort_keys=True) + "\n")
