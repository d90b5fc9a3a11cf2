from pathlib import Path

from rlflow.autoscaler import HOLD, compute_target
from rlflow.dataflow import BalanceWindow, LayoutRow
from rlflow.report import layout_rows_from_parsed, parse_report, render_report

GOLDEN = Path(__file__).parent / "golden" / "balance_report.txt"

ROWS = (
    LayoutRow("raas-0", 4, 700, 630, 0.9, 157.5, "healthy"),
    LayoutRow("raas-1", 2, 300, 270, 0.9, 135.0, "suspect"),
)
WINDOW = BalanceWindow(10, 123.456, 0.0, 100.0, 10.0, 2.3456, 0.19, 6, 1000, 900, 800, 45, ROWS)


def test_matches_golden_byte_for_byte():
    decision = compute_target(6, 0.19, 900, 800)
    assert render_report(WINDOW, decision) == GOLDEN.read_text()


def test_layout_column_edges_line_up_with_header():
    header, *rows = [l for l in GOLDEN.read_text().splitlines() if l.startswith(("uid", "raas-"))]
    for name in ("gpus", "produced", "accepted", "accept_rate", "throughput/gpu", "status"):
        end = header.index(name) + len(name)
        for r in rows:
            assert r[end - 1] != " " and (end == len(r) or r[end] == " ")


def test_parse_round_trip():
    parsed = parse_report(GOLDEN.read_text())
    assert parsed["iterations"] == 10
    assert parsed["window"]["rollout_wait_fraction"] == 0.19
    assert parsed["production"]["consumed"] == 800
    assert parsed["production"]["accept_rate"] == 0.9
    assert parsed["decision"] == {"branch": "scale_up", "G_target": 8, "estimated_delta_gpus": 2,
                                  "weight_transfer_active": False}
    assert layout_rows_from_parsed(parsed) == list(ROWS)
    assert parsed["total"] == {"instances": 2, "gpus": 6, "produced": 1000, "accepted": 900}


def test_zero_production_window():
    empty = BalanceWindow(10, 50.0, 0.0, 50.0, 5.0, 0.0, 0.0, 8, 0, 0, 0, 0,
                          (LayoutRow("r", 8, 0, 0, 0.0, 0.0, "healthy"),))
    decision = compute_target(8, 0.0, 0, 0)
    assert decision.branch == HOLD
    text = render_report(empty, decision)
    parsed = parse_report(text)
    assert parsed["production"]["accept_rate"] == 0.0
    assert "  accept_rate          : 0.0000" in text
    assert "produce_consume_ratio  : 0.0000" in text
    assert parsed["decision"]["branch"] == "hold"


def test_rows_keep_registration_order():
    rows = tuple(LayoutRow(f"z{i}" if i % 2 else f"a{i}", 1, i, i, 1.0, float(i), "healthy") for i in range(5))
    w = BalanceWindow(10, 1.0, 0.0, 1.0, 0.1, 0.0, 0.0, 5, 10, 10, 10, 0, rows)
    parsed = parse_report(render_report(w, compute_target(6, 0.0, 10, 10)))
    assert [r["uid"] for r in parsed["layout"]] == [r.uid for r in rows]
