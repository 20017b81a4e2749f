import xml.etree.ElementTree as ET

import numpy as np
import pytest

from snnbp import plots

SVG = "{http://www.w3.org/2000/svg}"


def _parse(path):
    root = ET.parse(path).getroot()
    assert root.tag == f"{SVG}svg"
    return root


def test_loglog_fit(tmp_path):
    x = np.array([20, 40, 80])
    path = tmp_path / "fit.svg"
    plots.loglog_fit(path, x, 2.0 * x**-1.0, -1.0, np.log(2.0), "N", "RMSE", "fit & <check>")
    root = _parse(path)
    assert len(root.findall(f".//{SVG}circle")) == 3
    assert "fit & <check>" in "".join(root.itertext())


def test_mean_band(tmp_path):
    x = np.linspace(-1, 1, 11)
    path = tmp_path / "band.svg"
    plots.mean_band(path, x, np.sin(x), np.full(11, 0.1), np.sin(x), np.full(11, 0.098), "x_1", "band")
    _parse(path)


def test_trace_with_nonfinite(tmp_path):
    path = tmp_path / "trace.svg"
    plots.trace(path, [0, 10, 20, 30], [1.0, 0.5, np.nan, np.inf], "grad", "decay")
    _parse(path)


@pytest.mark.parametrize("values", [[1.0], [3.0, 3.0, 3.0]])
def test_degenerate_ranges(tmp_path, values):
    path = tmp_path / "flat.svg"
    plots.trace(path, list(range(len(values))), values, "v", "flat")
    _parse(path)
