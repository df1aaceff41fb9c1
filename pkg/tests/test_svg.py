import xml.etree.ElementTree as ET

import numpy as np
import pytest

from funnelmpc.svg import Series, _ticks, line_plot

NS = "{http://www.w3.org/2000/svg}"


def test_line_plot_structure():
    t = np.linspace(0, 1, 11)
    doc = line_plot([Series("a", t, t ** 2), Series("b", t, -t, dashed=True, step=True)], title="x & y")
    root = ET.fromstring(doc)
    lines = root.findall(f"{NS}polyline")
    assert len(lines) == 2
    assert lines[1].get("stroke-dasharray") == "6,4"
    # step series doubles its points
    assert len(lines[1].get("points").split()) == 2 * 11 - 1
    assert "x &amp; y" in doc


def test_nonfinite_values_are_skipped():
    t = np.linspace(0, 1, 5)
    root = ET.fromstring(line_plot([Series("a", t, np.array([0, np.inf, 1, np.nan, 2.0]))]))
    assert len(root.find(f"{NS}polyline").get("points").split()) == 3


def test_empty_plot_rejected():
    with pytest.raises(ValueError):
        line_plot([Series("a", np.array([]), np.array([]))])


@pytest.mark.parametrize("lo, hi", [(0.0, 1.0), (-3.2, 410.0), (335.0, 339.0), (1e-6, 3e-6)])
def test_ticks_inside_range(lo, hi):
    ticks = _ticks(lo, hi)
    assert 2 <= len(ticks) <= 11
    assert ticks.min() >= lo - 1e-9 * (hi - lo) and ticks.max() <= hi + 1e-9 * (hi - lo)
