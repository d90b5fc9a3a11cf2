"""Plain-text balance report: rendering and parsing.

Layout::

    --- Window (last N iterations) ---
    <23-char label>: value
    ...
    --- RaaS Instance Layout (last N iterations) ---
    uid / gpus / produced / accepted / accept_rate / throughput/gpu / status
    ---
    Total: M instances, G GPUs, P produced, A accepted

Times are printed with 2 decimals, fractions and ratios with 4,
per-GPU throughput with 2, counts as integers.
"""

from __future__ import annotations

import re

from .dataflow import BalanceWindow, LayoutRow

LABEL_WIDTH = 23
_COLS = (("uid", 18, "<"), ("gpus", 4, ">"), ("produced", 12, ">"), ("accepted", 12, ">"),
         ("accept_rate", 14, ">"), ("throughput/gpu", 16, ">"), ("status", 10, ">"))


def _line(label: str, value) -> str:
    return f"{label:<{LABEL_WIDTH}}: {value}"


def _row(values) -> str:
    return "".join(f"{str(v):{align}{width}}" for v, (_, width, align) in zip(values, _COLS))


def render_report(window: BalanceWindow, decision) -> str:
    n = window.n_iterations
    lines = [
        f"--- Window (last {n} iterations) ---",
        _line("wall_time_sec", f"{window.wall_time_sec:.2f}"),
        _line("eval_time_sec", f"{window.eval_time_sec:.2f}"),
        _line("training_time_sec", f"{window.training_time_sec:.2f}"),
        _line("avg_step_time_sec", f"{window.avg_step_time_sec:.2f}"),
        _line("avg_batch_wait_sec", f"{window.avg_batch_wait_sec:.2f}"),
        _line("rollout_wait_fraction", f"{window.wait_fraction:.4f}"),
        "",
        "--- Production ---",
        _line("total_raas_gpus", window.total_raas_gpus),
        _line("produced", window.produced),
        _line("entered", window.entered),
        _line("  accept_rate", f"{window.accept_rate:.4f}"),
        _line("consumed", window.consumed),
        _line("stale_skipped", window.stale_skipped),
        _line("  stale_rate", f"{window.stale_rate:.4f}"),
        _line("throughput_per_gpu", f"{window.throughput_per_gpu:.2f}"),
        _line("produce_consume_ratio", f"{window.produce_consume_ratio:.4f}"),
        "",
        "--- Scaling decision ---",
        _line("branch", decision.branch),
        _line("G_target", decision.G_target),
        _line("estimated_delta_gpus", f"{decision.estimated_delta_gpus:+d}"),
        _line("weight_transfer_active", "true" if decision.weight_transfer_active else "false"),
        "",
        f"--- RaaS Instance Layout (last {n} iterations) ---",
        _row(name for name, _, _ in _COLS),
    ]
    for r in window.layout:
        lines.append(_row((r.uid, r.gpus, r.produced, r.accepted, f"{r.accept_rate:.4f}",
                           f"{r.throughput_per_gpu:.2f}", r.status)))
    lines.append("---")
    lines.append(
        f"Total: {len(window.layout)} instances, {sum(r.gpus for r in window.layout)} GPUs, "
        f"{sum(r.produced for r in window.layout)} produced, {sum(r.accepted for r in window.layout)} accepted"
    )
    return "\n".join(lines) + "\n"


_KV = re.compile(r"^(\s*\S+)\s*: (.*)$")
_HEADER = re.compile(r"^--- (.+?) ---$")
_TOTAL = re.compile(r"^Total: (\d+) instances, (\d+) GPUs, (\d+) produced, (\d+) accepted$")


def _number(text: str):
    if text in ("true", "false"):
        return text == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def parse_report(text: str) -> dict:
    """Recover every field of a rendered report.

    Returns ``{"window": {...}, "production": {...}, "decision": {...},
    "layout": [row dicts], "total": {...}, "iterations": N}``.
    """
    out: dict = {"window": {}, "production": {}, "decision": {}, "layout": [], "total": {}}
    section = None
    expect_layout_header = False
    for raw in text.splitlines():
        if not raw.strip():
            continue
        m = _HEADER.match(raw)
        if m:
            title = m.group(1)
            if title.startswith("Window"):
                section = "window"
                out["iterations"] = int(re.search(r"last (\d+)", title).group(1))
            elif title == "Production":
                section = "production"
            elif title == "Scaling decision":
                section = "decision"
            elif title.startswith("RaaS Instance Layout"):
                section = "layout"
                expect_layout_header = True
            continue
        if raw == "---":
            section = "total"
            continue
        if section == "layout":
            if expect_layout_header:
                expect_layout_header = False
                continue
            uid, gpus, prod, acc, rate, tpg, status = raw.split()
            out["layout"].append({"uid": uid, "gpus": int(gpus), "produced": int(prod), "accepted": int(acc),
                                  "accept_rate": float(rate), "throughput_per_gpu": float(tpg),
                                  "status": status})
        elif section == "total":
            m = _TOTAL.match(raw)
            if not m:
                raise ValueError(f"malformed total line: {raw!r}")
            out["total"] = dict(zip(("instances", "gpus", "produced", "accepted"), map(int, m.groups())))
        elif section in ("window", "production", "decision"):
            m = _KV.match(raw)
            if not m:
                raise ValueError(f"malformed line: {raw!r}")
            out[section][m.group(1).strip()] = _number(m.group(2))
    return out


def layout_rows_from_parsed(parsed: dict) -> list[LayoutRow]:
    return [LayoutRow(**row) for row in parsed["layout"]]
