# tests/test_figures.py
import numpy as np
import pandas as pd
import pytest
import torch
from PIL import Image

from src.errors import DataError, DimensionError
from src.figures import advection_arrows, plot_advection, plot_branches, plot_coefficients, plot_mae_curve
from src.phycell import AdvectionField


def _assert_png(path):
    with Image.open(path) as img:
        assert img.format == "PNG"
        assert img.size[0] > 0 and img.size[1] > 0


def test_zero_field_has_zero_arrows():
    X, Y, U, V = advection_arrows(np.zeros((4, 4)), np.zeros((4, 4)), stride=1)
    assert X.shape == (4, 4)
    assert not U.any() and not V.any()


def test_uniform_field_arrows():
    X, Y, U, V = advection_arrows(np.ones((8, 8)), np.zeros((8, 8)), stride=2)
    assert X.shape == (4, 4)
    assert np.all(V == 1.0) and np.all(U == 0.0)
    # latent index 2 is centred on pixel 2 * 4 + 1.5
    assert Y[1, 0] == pytest.approx(9.5) and X[0, 1] == pytest.approx(9.5)


def test_arrow_components_must_match():
    with pytest.raises(DimensionError):
        advection_arrows(np.zeros((4, 4)), np.zeros((4, 5)))


def test_plot_advection(tmp_path):
    field = AdvectionField(u_x=torch.ones(1, 8, 8), u_y=torch.zeros(1, 8, 8))
    path = plot_advection(field, np.zeros((32, 32)), str(tmp_path / "adv.png"), stride=2, title="test")
    _assert_png(path)
    with pytest.raises(DimensionError):
        plot_advection(field, np.zeros((16, 16)), str(tmp_path / "bad.png"))


def test_plot_branches_and_curves(tmp_path):
    frames = [np.full((8, 8), v) for v in (0.1, 0.2, 0.3)]
    _assert_png(plot_branches(frames, frames, frames, str(tmp_path / "b.png"), truth=frames))
    _assert_png(plot_mae_curve({"advdiff": [0.01, 0.02], "persistence": [0.02, 0.04]}, str(tmp_path / "m.png")))
    utilization = pd.DataFrame({"term": ["D(1,0)", "D(0,1)"], "mean_abs_coefficient": [0.3, 0.1]})
    _assert_png(plot_coefficients(utilization, str(tmp_path / "c.png")))


def test_unwritable_path(tmp_path):
    blocker = tmp_path / "file.txt"
    blocker.write_text("x")
    with pytest.raises(DataError, match="Cannot write figure"):
        plot_mae_curve({"a": [1.0]}, str(blocker / "curve.png"))
