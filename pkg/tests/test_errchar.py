import csv

import numpy as np

from fpgap.backends import F32_BACKENDS, Backend, first_layer_output
from fpgap.core import Dense, Flatten, Network
from fpgap.errchar import (
    cross_backend_histogram, local_sweep, max_gradient_element, median_relative_difference, sweep_deltas,
    write_histogram_csv, write_sweep_csv,
)


def _linear_net(w):
    w = np.asarray(w, np.float32)
    return Network((1, w.size, 1), [Flatten(), Dense(np.stack([w, np.zeros_like(w)]), np.array([5, 0], np.float32))])


def test_gradient_of_linear_model_is_the_weights():
    net = _linear_net([0.1, -0.7, 0.3, 0.5])
    x = np.full((1, 4, 1), 0.5, np.float32)
    assert max_gradient_element(net, x) == (0, 1, 0)


def test_constant_network_picks_index_zero():
    net = _linear_net([0, 0, 0])
    assert max_gradient_element(net, np.full((1, 3, 1), 0.5, np.float32)) == (0, 0, 0)


def test_gradient_element_stable_across_steps(demo_net, demo_dataset):
    x = demo_dataset.images[demo_dataset.indices("test")[0]]
    picks = {max_gradient_element(demo_net, x, h) for h in (1e-2, 1e-3, 1e-4)}
    assert len(picks) == 1


def test_sweep_grid():
    d = sweep_deltas()
    assert len(d) == 401 and d[200] == 0 and d[0] == -1e-6 and d[-1] == 1e-6


def test_zero_offset_rows_are_zero(demo_net, demo_dataset):
    x = demo_dataset.images[0]
    recs = local_sweep(demo_net, x, (3, 3, 0), steps=21)
    zero = [r for r in recs if r.delta == 0]
    assert len(zero) == 5 and all(r.linf_change == 0 for r in zero)
    assert all(r.linf_change >= 0 for r in recs)
    assert all(abs(r.delta) <= 1e-6 for r in recs)


def test_self_histogram_is_all_zero(demo_net, demo_dataset):
    hist = cross_backend_histogram(demo_dataset.images[:5], demo_net, ["IM2COL_F32"])
    counts = hist.counts["IM2COL_F32"]
    assert counts[0] == hist.total and counts[1:].sum() == 0


def test_histogram_conservation_and_mass(demo_net, demo_dataset):
    imgs = demo_dataset.images[:10]
    hist = cross_backend_histogram(imgs, demo_net, list(F32_BACKENDS), reference="REF_F64")
    size = first_layer_output("DIRECT_F32", demo_net, imgs[0]).size
    assert hist.total == 10 * size
    for b in F32_BACKENDS:
        assert hist.counts[b.value].sum() == hist.total
        assert hist.values_above(b.value, 1e-9) > 0


def test_ref_vs_im2col_has_mass_above_1e_9(demo_net, demo_dataset):
    hist = cross_backend_histogram(demo_dataset.images[:10], demo_net, ["REF_F64"])
    assert hist.values_above("REF_F64", 1e-9) > 0


def test_csv_schemas(tmp_path, demo_net, demo_dataset):
    recs = local_sweep(demo_net, demo_dataset.images[0], (0, 0, 0), steps=5)
    write_sweep_csv(recs, tmp_path / "s.csv")
    with open(tmp_path / "s.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["delta", "backend", "linf_change"] and len(rows) == 25
    hist = cross_backend_histogram(demo_dataset.images[:2], demo_net, ["DIRECT_F32"])
    write_histogram_csv(hist, tmp_path / "h.csv")
    with open(tmp_path / "h.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["bin_lo", "bin_hi", "backend", "count"]
    assert sum(int(r["count"]) for r in rows) == hist.total


def test_winograd_median_exceeds_direct(demo_net, demo_dataset):
    imgs = demo_dataset.images[:50]
    wino = median_relative_difference(imgs, demo_net, Backend.WINOGRAD_F32)
    direct = median_relative_difference(imgs, demo_net, Backend.DIRECT_F32)
    print(f"median relative error: winograd {wino:.3g} direct {direct:.3g}")
    assert wino > direct
