"""Matplotlib figures written to files (Agg backend, no display needed)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402

from ..calculus import CR1, CR2, UNSUPPORTED, Region  # noqa: E402
from .metrics import TranscriptIndex  # noqa: E402

_RULE_STYLE = {CR1: ("tab:blue", "o"), CR2: ("tab:orange", "s"), UNSUPPORTED: ("lightgray", ".")}


def timeline(idx: TranscriptIndex, cfg, path) -> None:
    """Committed height per client (top) and view per honest replica (bottom) against time."""
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(9, 6), sharex=True)
    end = (idx.end or {}).get("final_time", 0)
    for c in cfg.clients:
        pts = [(0, 0)]
        for t, d in idx.commits.get(c.name, []):
            pts.append((t, max(pts[-1][1], d["height"])))
        pts.append((end, pts[-1][1]))
        xs, ys = zip(*pts)
        top.step(xs, ys, where="post", label=f"{c.name} ({c.assumption.describe()})")
        for conflict in idx.client_conflicts(c.name):
            top.axhline(conflict["height"], color="red", linestyle=":", linewidth=1)
    top.set_ylabel("committed height")
    top.legend(fontsize=7, loc="upper left")
    top.set_title(f"{cfg.name} (n={cfg.n}, seed={cfg.seed})")
    for r in range(cfg.n):
        if r in cfg.faults.faulty:
            continue
        pts = [(0, 0)] + list(idx.views.get(r, [])) + [(end, None)]
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts[:-1]]
        ys.append(ys[-1])
        bottom.step(xs, ys, where="post", alpha=0.6)
    bottom.yaxis.set_major_locator(MaxNLocator(integer=True))
    top.yaxis.set_major_locator(MaxNLocator(integer=True))
    bottom.set_ylabel("view (honest replicas)")
    bottom.set_xlabel("virtual time")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def region(reg: Region, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 6))
    for rule, (color, marker) in _RULE_STYLE.items():
        pts = [p for p in reg.points if p.supported_by == rule]
        if pts:
            ax.scatter([float(p.byz) for p in pts], [float(p.total) for p in pts],
                       c=color, marker=marker, s=18, label=rule)
    (rb, rt), (lb, lt) = reg.cr1_segment
    ax.plot([float(rb), float(lb)], [float(rt), float(lt)], color="tab:blue", linewidth=2)
    cb, ct = reg.cr2_corner
    ax.plot([float(cb)], [float(ct)], marker="*", markersize=14, color="tab:orange")
    ax.set_xlabel("Byzantine fraction")
    ax.set_ylabel("total faulty fraction")
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(f"client region, q_r={reg.q_r}")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def compare(regions: list, path) -> None:
    """CR1 segments and CR2 corners of several q_r values on one chart."""
    fig, ax = plt.subplots(figsize=(6, 6))
    for reg in regions:
        (rb, rt), (lb, lt) = reg.cr1_segment
        line, = ax.plot([float(rb), float(lb)], [float(rt), float(lt)], label=f"q_r={reg.q_r}")
        cb, ct = reg.cr2_corner
        ax.plot([float(cb)], [float(ct)], marker="*", markersize=12, color=line.get_color())
    ax.set_xlabel("Byzantine fraction")
    ax.set_ylabel("total faulty fraction")
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
