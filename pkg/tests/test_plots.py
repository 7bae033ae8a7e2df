import xml.etree.ElementTree as ET

import numpy as np
import pytest

from attnpatch.plots import bar_chart, qq_plot, sweep_chart

NS = "{http://www.w3.org/2000/svg}"


def parse(svg):
    return ET.fromstring(svg)


def test_bar_chart_one_bar_per_variant():
    rows = [
        {"variant": "baseline", "mean": 0.70, "stderr": 0.01},
        {"variant": "tap", "mean": 0.72, "stderr": 0.005},
        {"variant": "failed", "mean": float("nan"), "stderr": float("nan")},
    ]
    root = parse(bar_chart(rows))
    bars = [r for r in root.iter(f"{NS}rect") if r.get("fill") != "white"]
    assert len(bars) == 2
    labels = [t.text for t in root.iter(f"{NS}text")]
    assert {"baseline", "tap", "failed"} <= set(labels)


def test_taller_bar_for_larger_mean():
    rows = [{"variant": "a", "mean": 0.5, "stderr": 0.0}, {"variant": "b", "mean": 0.9, "stderr": 0.0}]
    bars = [r for r in parse(bar_chart(rows)).iter(f"{NS}rect") if r.get("fill") != "white"]
    assert float(bars[1].get("height")) > float(bars[0].get("height"))


def test_sweep_chart_has_baseline_and_points():
    points = [{"ratio": r, "mean": 0.6 + 0.01 * i, "stderr": 0.01} for i, r in enumerate([0.5, 1, 1.25, 2.5, 5])]
    root = parse(sweep_chart(points, {"mean": 0.62, "stderr": 0.01}))
    assert len(list(root.iter(f"{NS}circle"))) == 5
    assert any(line.get("stroke-dasharray") for line in root.iter(f"{NS}line"))


def test_qq_plot_points(rng):
    root = parse(qq_plot(rng.normal(size=40)))
    assert len(list(root.iter(f"{NS}circle"))) == 40
    with pytest.raises(ValueError):
        qq_plot([1.0])


def test_escapes_labels():
    root = parse(bar_chart([{"variant": "<a&b>", "mean": 0.5, "stderr": 0.1}]))
    assert "<a&b>" in [t.text for t in root.iter(f"{NS}text")]
