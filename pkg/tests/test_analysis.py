import json

import numpy as np
import pytest

from fflab import analysis as A
from fflab import layers as L
from fflab import model as M
from fflab import trainer as TR
from fflab.tensor import conv_output_hw

from oracles import conv2d_loop_macs


def test_conv_macs_match_loop_oracle():
    for k, s, p in [(1, 1, 0), (3, 1, 1), (3, 2, 1), (5, 1, 2), (2, 2, 0)]:
        counted = conv2d_loop_macs((2, 3, 8, 8), (4, 3, k, k), stride=s, padding=p)
        oh, ow = conv_output_hw(8, 8, k, k, s, p)
        assert 2 * A.conv_macs(3, 4, k, oh, ow) == counted  # batch of 2


def test_published_conv_example():
    assert A.conv_macs(3, 16, 3, 32, 32) == 442_368
    rng = np.random.default_rng(1)
    conv = L.Conv2d(3, 16, 3, rng, padding=1)
    assert sum(p.data.size for p in conv.parameters()) == 448
    row = A.LayerCost("conv", 448, A.conv_macs(3, 16, 3, 32, 32))
    assert row.flops == 884_736


def test_linear_param_example():
    rng = np.random.default_rng(2)
    fc = L.Linear(10, 5, rng)
    assert sum(p.data.size for p in fc.parameters()) == 55
    assert A.linear_macs(10, 5) == 50


def test_transpose_and_depthwise_formulas():
    # A stride-2 k2 transposed conv touches each input element 4*cout times.
    assert A.conv_transpose_macs(3, 5, 2, 4, 4) == 2 * 2 * 3 * 5 * 16
    assert A.depthwise_macs(6, 7, 10, 10) == 49 * 6 * 100


@pytest.mark.parametrize("config,shape", [
    (M.toy_config(), (1, 1, 64, 64)),
    (M.toy_config(fusion="add"), (1, 1, 64, 64)),
    (M.toy_config(fusion="stepwise"), (1, 1, 64, 64)),
    (M.toy_config(use_ftm=False), (1, 1, 64, 64)),
    (M.toy_config(ftm_outer_double=False), (1, 1, 64, 64)),
    (M.tiny_config(), (1, 1, 32, 32)),
    (M.structural_config(stem_depth=1, stage_depths=(1, 2, 1)), (1, 3, 64, 64)),
])
def test_param_totals_match_model(config, shape):
    report = A.count_params_flops(config, shape)
    model = M.build_model(config, seed=0)
    assert report.total_params == M.count_parameters(model)


def test_flops_are_twice_macs():
    report = A.count_params_flops(M.toy_config(), (1, 1, 64, 64))
    for row in report.rows:
        assert row.flops == 2 * row.macs
    assert report.total_flops == 2 * report.total_macs


def test_macs_scale_with_batch_params_do_not():
    one = A.count_params_flops(M.tiny_config(), (1, 1, 32, 32))
    two = A.count_params_flops(M.tiny_config(), (2, 1, 32, 32))
    assert two.total_params == one.total_params
    assert two.total_macs == 2 * one.total_macs


def test_report_serialization():
    report = A.count_params_flops(M.tiny_config(), (1, 1, 32, 32))
    text = report.table()
    assert "total" in text and "FLOPs" in text
    parsed = json.loads(report.to_json())
    assert parsed["totals"]["params"] == report.total_params
    assert sum(r["macs"] for r in parsed["rows"]) == pytest.approx(report.total_macs)
    assert parsed["input_shape"] == [1, 1, 32, 32]


def test_count_validation():
    with pytest.raises(ValueError, match="channels"):
        A.count_params_flops(M.toy_config(), (1, 3, 64, 64))
    with pytest.raises(ValueError, match="divisible by 32"):
        A.count_params_flops(M.toy_config(), (1, 1, 60, 64))


def test_structural_preset_published_budget():
    report = A.count_params_flops(M.structural_config(), (1, 3, 512, 512))
    assert abs(report.total_params - 29.02e6) / 29.02e6 < 0.10
    assert abs(report.total_macs - 23.67e9) / 23.67e9 < 0.15


def test_receptive_field_arithmetic():
    assert A.receptive_field([(3, 1)]) == (3, 1)
    assert A.receptive_field([(3, 1), (3, 1)]) == (5, 1)
    assert A.receptive_field([(4, 4), (2, 2)]) == (8, 8)
    assert A.receptive_field([(4, 4), (2, 2), (3, 1)]) == (24, 8)


def test_branch_receptive_field_grows():
    cfg = M.toy_config()
    rfs = [A.branch_receptive_field(cfg, b)[0] for b in (1, 2, 3)]
    assert rfs[0] < rfs[1] < rfs[2]
    with pytest.raises(ValueError, match="unknown branch"):
        A.branch_receptive_field(cfg, 4)


def test_erf_single_conv_support_exactly_3x3():
    rng = np.random.default_rng(3)
    conv = L.Conv2d(1, 1, 3, rng, padding=1)
    images = [np.random.default_rng(s).uniform(size=(1, 1, 9, 9)) for s in range(2)]
    erf = A.erf_of(lambda x: conv(x), images)
    support = erf.values > 0
    assert A.erf_area(erf, threshold=1e-12) == 9
    box = np.zeros((9, 9), dtype=bool)
    box[3:6, 3:6] = True
    np.testing.assert_array_equal(support, box)
    assert erf.values.max() == 1.0


def test_erf_stacked_convs_within_5x5():
    rng = np.random.default_rng(4)
    c1 = L.Conv2d(1, 2, 3, rng, padding=1)
    c2 = L.Conv2d(2, 1, 3, rng, padding=1)
    images = [np.random.default_rng(9).uniform(size=(1, 1, 11, 11))]
    erf = A.erf_of(lambda x: c2(c1(x)), images)
    support = erf.values > 0
    rows, cols = np.nonzero(support)
    assert rows.min() >= 3 and rows.max() <= 7
    assert cols.min() >= 3 and cols.max() <= 7


def test_erf_branch_support_within_theoretical_rf():
    # Without focus transitions every branch is a pure conv stack, so the
    # measured support must fit the composed kernel footprint.
    cfg = M.toy_config(use_ftm=False)
    net = M.build_model(cfg, seed=5)
    for branch in (1, 2, 3):
        erf = A.effective_receptive_field(net, branch, probes=2, size=64, seed=6)
        rf, _ = A.branch_receptive_field(cfg, branch)
        rows, cols = np.nonzero(erf.values > 0)
        assert rows.max() - rows.min() + 1 <= rf
        assert cols.max() - cols.min() + 1 <= rf
        assert abs((rows.min() + rows.max()) / 2 - 32) <= rf
        assert abs((cols.min() + cols.max()) / 2 - 32) <= rf


def test_erf_tags_and_validation():
    net = M.build_model(M.tiny_config(), seed=7)
    with pytest.raises(ValueError, match="unknown branch"):
        A.effective_receptive_field(net, "stage9")
    erf = A.effective_receptive_field(net, "density", probes=1, size=32)
    assert erf.values.shape == (32, 32)
    assert 0.0 <= erf.values.min() and erf.values.max() == 1.0
    assert net.training  # restored


def test_erf_deterministic():
    net = M.build_model(M.tiny_config(), seed=8)
    a = A.effective_receptive_field(net, 1, probes=2, size=32, seed=9)
    b = A.effective_receptive_field(net, 1, probes=2, size=32, seed=9)
    np.testing.assert_array_equal(a.values, b.values)


def test_heatmap_zero_model_uniform():
    net = M.build_model(M.toy_config(), seed=10)
    for p in net.parameters():
        p.data[...] = 0.0
    image = np.random.default_rng(11).uniform(size=(64, 64))
    heat = A.branch_heatmap(net, image, 1)
    np.testing.assert_array_equal(heat, np.zeros((64, 64)))


def test_heatmap_range_shape_and_pgm(tmp_path):
    net = M.build_model(M.toy_config(), seed=12)
    image = np.random.default_rng(13).uniform(size=(70, 50))
    path = tmp_path / "heat.pgm"
    for branch in (1, 2, 3):
        heat = A.branch_heatmap(net, image, branch, path=path if branch == 1 else None)
        assert heat.shape == (70, 50)
        assert heat.min() >= 0.0 and heat.max() <= 1.0
    assert path.exists()
    with pytest.raises(ValueError, match="branch must be"):
        A.branch_heatmap(net, image, 0)


def test_density_grid_trims_to_image_cells():
    net = M.build_model(M.toy_config(), seed=14)
    grid = A.density_grid(net, np.random.default_rng(15).uniform(size=(70, 50)))
    assert grid.shape == (9, 7)
    image = np.random.default_rng(16).uniform(size=(64, 64))
    assert A.density_grid(net, image).sum() == pytest.approx(
        TR.predicted_count(net, image), abs=1e-12)


def test_export_density_zero_model(tmp_path):
    net = M.build_model(M.toy_config(), seed=17)
    net.head.weight.data[...] = 0.0
    net.head.bias.data[...] = 0.0
    image = np.random.default_rng(18).uniform(size=(64, 64))
    count, grid = A.export_density(net, image, tmp_path / "dens")
    assert count == 0.0
    first = (tmp_path / "dens.csv").read_text().splitlines()[0]
    assert first == "count,0.000000"
    assert (tmp_path / "dens.pgm").exists()


def test_export_density_csv_self_consistent(tmp_path):
    net = M.build_model(M.toy_config(), seed=19)
    image = np.random.default_rng(20).uniform(size=(96, 64))
    count, grid = A.export_density(net, image, tmp_path / "dens")
    lines = (tmp_path / "dens.csv").read_text().splitlines()
    header_count = float(lines[0].split(",")[1])
    cells = np.array([[float(v) for v in line.split(",")] for line in lines[1:]])
    assert cells.shape == grid.shape
    assert abs(cells.sum() - header_count) < 1e-6
