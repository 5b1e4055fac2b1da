"""Figure rendering for sweep output.

Each plot function takes metrics rows (dicts as produced by
``harness.sweep`` or re-read from CSV, where every value may be a
string) and writes one PNG.  ``render_report`` inspects the columns and
renders every figure the rows support, returning the written paths.
"""

from __future__ import annotations

import os
from typing import Any, Iterable, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def _f(row: dict, key: str) -> float:
    return float(row[key])


def detail_rows(rows: Iterable[dict]) -> list[dict]:
    """Drop the :mean/:stddev summary rows appended by sweeps."""
    return [
        row
        for row in rows
        if not str(row["scenario"]).endswith((":mean", ":stddev"))
    ]


def _grouped_means(rows: Sequence[dict], x_key: str, y_keys: Sequence[str]):
    """Per-x mean of each y column over seeds; x values sorted ascending."""
    buckets: dict[float, list[dict]] = {}
    for row in rows:
        buckets.setdefault(_f(row, x_key), []).append(row)
    xs = sorted(buckets)
    series = {
        y: [sum(_f(r, y) for r in buckets[x]) / len(buckets[x]) for x in xs]
        for y in y_keys
    }
    return xs, series


def plot_throughput(rows: Iterable[dict], path: str) -> str:
    rows = detail_rows(rows)
    xs, series = _grouped_means(rows, "capacity", ("total_tps", "distinct_tps"))
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    ax.plot(xs, series["total_tps"], "o-", label="total (incl. duplicate inclusions)")
    ax.plot(xs, series["distinct_tps"], "s-", label="distinct settled")
    for row in rows:
        ax.plot(_f(row, "capacity"), _f(row, "total_tps"), ".", color="C0", alpha=0.35)
        ax.plot(_f(row, "capacity"), _f(row, "distinct_tps"), ".", color="C1", alpha=0.35)
    ax.set_xlabel("microblocks per macroblock (capacity)")
    ax.set_ylabel("throughput (tx/s)")
    ax.set_title("Throughput vs. block capacity")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_block_size(rows: Iterable[dict], path: str) -> str:
    rows = detail_rows(rows)
    xs, series = _grouped_means(
        rows, "capacity", ("mean_block_bytes", "expected_full_block_bytes")
    )
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    mib = 1024.0 * 1024.0
    ax.plot(xs, [v / mib for v in series["mean_block_bytes"]], "o-", label="observed mean")
    ax.plot(
        xs,
        [v / mib for v in series["expected_full_block_bytes"]],
        "k--",
        label="packed-to-capacity bound",
    )
    ax.set_xlabel("microblocks per macroblock (capacity)")
    ax.set_ylabel("macroblock size (MiB)")
    ax.set_title("Block size vs. capacity")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_latency(rows: Iterable[dict], path: str) -> str:
    rows = detail_rows(rows)
    xs, series = _grouped_means(
        rows,
        "tenure_s",
        ("mean_queue_s", "mean_inclusion_s", "mean_latency_s", "p90_latency_s"),
    )
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    ax.plot(xs, series["mean_latency_s"], "o-", label="mean total")
    ax.plot(xs, series["p90_latency_s"], "^--", label="p90 total")
    ax.plot(xs, series["mean_queue_s"], "s-", label="queueing (inject → packaged)")
    ax.plot(xs, series["mean_inclusion_s"], "d-", label="inclusion (packaged → chain)")
    ax.set_xlabel("leader tenure (s)")
    ax.set_ylabel("transaction latency (s)")
    ax.set_title("Settlement latency vs. tenure")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_selfish(rows: Iterable[dict], path: str) -> str:
    rows = detail_rows(rows)
    xs, series = _grouped_means(
        rows, "alpha", ("attacker_revenue_share", "attacker_block_share")
    )
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    ax.plot(xs, series["attacker_revenue_share"], "o-", label="revenue share")
    ax.plot(xs, series["attacker_block_share"], "s--", label="block share")
    lo, hi = min(xs), max(xs)
    ax.plot([lo, hi], [lo, hi], "k:", label="proportional (honest) share")
    ax.set_xlabel("attacker hash-power fraction α")
    ax.set_ylabel("share of chain")
    ax.set_title("Withholding leader: earned share vs. hash power")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_doublespend(rows: Iterable[dict], path: str) -> str:
    rows = detail_rows(rows)
    depth_cols = sorted(
        (col for col in rows[0] if col.startswith("success_at_")),
        key=lambda c: int(c.rsplit("_", 1)[1]),
    )
    depths = [int(c.rsplit("_", 1)[1]) for c in depth_cols]
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for row in sorted(rows, key=lambda r: _f(r, "alpha")):
        ax.plot(
            depths,
            [_f(row, col) for col in depth_cols],
            "o-",
            label=f"α = {_f(row, 'alpha'):.2f}",
        )
    ax.set_xlabel("confirmation depth k")
    ax.set_ylabel("fraction of races overtaking depth k")
    ax.set_title("Double-spend race success vs. confirmation depth")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_report(rows: Sequence[dict], out_dir: str, stem: str) -> list[str]:
    """Render every figure the given rows have the columns for."""
    rows = list(rows)
    if not rows:
        raise ValueError("no rows to plot")
    os.makedirs(out_dir, exist_ok=True)
    columns = set(rows[0])
    written: list[str] = []

    def out(name: str) -> str:
        return os.path.join(out_dir, f"{stem}-{name}.png")

    if any(col.startswith("success_at_") for col in columns):
        written.append(plot_doublespend(rows, out("doublespend")))
        return written
    if "attacker_revenue_share" in columns:
        written.append(plot_selfish(rows, out("selfish")))
        return written

    body = detail_rows(rows)
    capacities = {row["capacity"] for row in body}
    tenures = {row["tenure_s"] for row in body}
    if len(capacities) > 1:
        written.append(plot_throughput(rows, out("throughput")))
        written.append(plot_block_size(rows, out("blocksize")))
    if len(tenures) > 1:
        written.append(plot_latency(rows, out("latency")))
    if not written:
        written.append(plot_throughput(rows, out("throughput")))
        written.append(plot_block_size(rows, out("blocksize")))
    return written
