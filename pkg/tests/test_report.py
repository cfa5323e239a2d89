import xml.etree.ElementTree as ET

import pytest

from taps.errors import ConfigurationError
from taps.report import (KIND_COLORS, SHARED_COLOR, SharingMap, frontier_csv, frontier_svg, read_frontier_csv,
                         sharing_map_svg)

SVG = "{http://www.w3.org/2000/svg}"


def sample_map():
    return SharingMap(["conv1", "conv2", "fc3"], ["conv", "conv", "linear"], ["perm", "swap"],
                      [[False, False, True], [True, False, False]])


def test_sharing_map_svg_cells():
    root = ET.fromstring(sharing_map_svg(sample_map()))
    cells = [r for r in root.iter(f"{SVG}rect") if r.get("class") == "cell"]
    assert len(cells) == 6
    by_key = {(c.get("data-task"), c.get("data-layer")): c for c in cells}
    assert by_key[("perm", "fc3")].get("data-task-specific") == "true"
    assert by_key[("perm", "fc3")].get("fill") == KIND_COLORS["linear"]
    assert by_key[("swap", "conv1")].get("fill") == KIND_COLORS["conv"]
    assert by_key[("swap", "fc3")].get("fill") == SHARED_COLOR
    assert by_key[("swap", "fc3")].get("data-kind") == "linear"


def test_sharing_map_svg_is_deterministic():
    assert sharing_map_svg(sample_map()) == sharing_map_svg(sample_map())


def test_sharing_map_escapes_names():
    smap = SharingMap(["a<b"], ["mlp"], ['t"&'], [[True]])
    root = ET.fromstring(sharing_map_svg(smap))
    cell = next(r for r in root.iter(f"{SVG}rect") if r.get("class") == "cell")
    assert cell.get("data-task") == 't"&' and cell.get("data-layer") == "a<b"


def test_sharing_map_validation():
    with pytest.raises(ConfigurationError):
        SharingMap(["a"], ["conv", "conv"], [], [])
    with pytest.raises(ConfigurationError):
        SharingMap(["a"], ["gru"], [], [])
    with pytest.raises(ConfigurationError):
        SharingMap(["a"], ["conv"], ["t"], [[True, False]])


def test_from_report_and_json():
    report = {"layer_names": ["q", "o"], "layer_kinds": ["qkv", "projection"],
              "tasks": [{"task_id": "x", "layer_map": [True, False]}]}
    smap = SharingMap.from_report(report)
    assert smap.to_dict() == {"layers": ["q", "o"], "kinds": ["qkv", "projection"],
                              "tasks": [{"task_id": "x", "task_specific": [True, False]}]}
    assert smap.to_json().endswith("\n")


ROWS = [{"lambda": 0.0, "accuracy": 91.25, "layer_pct": 100.0, "param_pct": 80.5},
        {"lambda": 0.5, "accuracy": 88.0, "layer_pct": 100 / 3, "param_pct": 12.1}]


def test_frontier_csv_round_trip():
    text = frontier_csv(ROWS)
    assert text.splitlines()[0] == "lambda,accuracy,layer_pct,param_pct"
    back = read_frontier_csv(text)
    assert back == [{k: r[k] for k in ("lambda", "accuracy", "layer_pct", "param_pct")} for r in ROWS]


def test_frontier_svg_points():
    root = ET.fromstring(frontier_svg(ROWS))
    points = [c for c in root.iter(f"{SVG}circle") if c.get("class") == "point"]
    assert [float(p.get("data-lambda")) for p in points] == [0.0, 0.5]
    assert float(points[1].get("data-layer-pct")) == 100 / 3
    # higher accuracy is drawn higher
    assert float(points[0].get("cy")) < float(points[1].get("cy"))
    with pytest.raises(ConfigurationError):
        frontier_svg([])
