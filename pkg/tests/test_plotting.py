import numpy as np
import pytest

from eqddm import plotting

from .test_evaluation import fake_prediction


def test_svg_written_and_deterministic(tmp_path):
    p = fake_prediction(std=0.2)
    a = plotting.plot_prediction(p, tmp_path / "a", formats=("svg", "png"))
    b = plotting.plot_prediction(p, tmp_path / "b", formats=("svg", "png"))
    assert [x.name for x in a] == ["fake_joint0.svg", "fake_joint0.png", "fake_joint1.svg", "fake_joint1.png"]
    for x, y in zip(a, b):
        assert x.stat().st_size > 1000
        assert x.read_bytes() == y.read_bytes()
    assert a[0].read_text().lstrip().startswith("<?xml")


def test_figure_contents():
    fig = plotting.joint_figure(fake_prediction(S=3), 0, title="demo")
    axes = fig.axes
    assert len(axes) == 4
    assert [ax.get_ylabel() for ax in axes[:3]] == ["x", "y", "z"]
    labels = [t.get_text() for t in axes[0].get_legend().get_texts()]
    assert labels[1:] == ["truth", "prediction"]
    strip = axes[3].images[0].get_array()
    assert strip.shape == (1, 8) and set(np.unique(strip)) <= {0, 1, 2}
    plotting.plt.close(fig)


def test_unsupported_format(tmp_path):
    fig = plotting.joint_figure(fake_prediction(), 0)
    with pytest.raises(ValueError, match="unsupported"):
        plotting.save_figure(fig, tmp_path / "x.bmp")
