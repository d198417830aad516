from fractions import Fraction

import numpy as np
import pytest

from fpgap.backends import (
    F32_BACKENDS, Backend, TileGeometry, conv_direct, first_layer_output, infer, quantize_network, quantized_infer,
    tile_geometry, winograd_conv,
)
from fpgap.core import Conv2d, Dense, Flatten, Network, PreconditionError, QuantizationScheme, ReLU, ShapeError, to_rational

from helpers import random_image, small_conv_network

ALL = list(Backend)


def _exact_direct(x, w, b, padding):
    """Convolution in Fractions with plain Python loops, independent of the backends."""
    xr = to_rational(x.transpose(2, 0, 1))
    wr, br = to_rational(w), to_rational(b)
    c, h, wd = xr.shape
    pad = np.empty((c, h + 2 * padding, wd + 2 * padding), dtype=object)
    pad.fill(Fraction(0))
    pad[:, padding:padding + h, padding:padding + wd] = xr
    oc, _, kh, kw = w.shape
    ho, wo = pad.shape[1] - kh + 1, pad.shape[2] - kw + 1
    out = np.empty((oc, ho, wo), dtype=object)
    for o in range(oc):
        for i in range(ho):
            for j in range(wo):
                s = br[o]
                for ci in range(c):
                    for u in range(kh):
                        for v in range(kw):
                            s += wr[o, ci, u, v] * pad[ci, i + u, j + v]
                out[o, i, j] = s
    return out


def test_identity_1x1_conv_is_exact_on_every_backend():
    net = Network((5, 5, 1), [Conv2d(np.ones((1, 1, 1, 1), np.float32), np.zeros(1, np.float32)), Flatten(),
                              Dense(np.eye(25, dtype=np.float32), np.zeros(25, np.float32))])
    x = random_image(np.random.default_rng(0), (5, 5, 1))
    for b in ALL:
        y = infer(b, net, x.astype(np.float64) if b is Backend.REF_F64 else x)
        assert all(Fraction(float(p)) == Fraction(float(q)) for p, q in zip(np.asarray(y).flat, x.flat)), b


def test_exact_rat_is_the_real_value_of_the_operands():
    rng = np.random.default_rng(1)
    w = rng.standard_normal((2, 2, 3, 3)).astype(np.float32)
    bias = rng.standard_normal(2).astype(np.float32)
    net = Network((5, 5, 2), [Conv2d(w, bias, padding=1), Flatten(),
                              Dense(np.eye(50, dtype=np.float32), np.zeros(50, np.float32))])
    x = random_image(rng, (5, 5, 2))
    got = first_layer_output(Backend.EXACT_RAT, net, x)
    assert np.array_equal(got, _exact_direct(x, w, bias, 1))
    f32 = first_layer_output(Backend.DIRECT_F32, net, x)
    assert not all(Fraction(float(a)) == b for a, b in zip(f32.flat, got.flat))


def test_winograd_differs_from_direct_on_demo(demo_net):
    rng = np.random.default_rng(2)
    diffs = []
    for _ in range(100):
        x = random_image(rng, demo_net.input_shape)
        diffs.append(np.max(np.abs(infer("WINOGRAD_F32", demo_net, x).astype(np.float64)
                                   - infer("DIRECT_F32", demo_net, x).astype(np.float64))))
    print("max |dlogit| winograd vs direct: max %.3g median %.3g" % (max(diffs), float(np.median(diffs))))
    assert max(diffs) > 0


def test_winograd_zero_and_delta_filters():
    rng = np.random.default_rng(3)
    tile = rng.integers(-8, 9, (6, 6)).astype(np.float32)
    assert not np.any(winograd_conv(tile, np.zeros((3, 3), np.float32)))
    delta = np.zeros((3, 3), np.float32)
    delta[1, 1] = 1
    assert np.array_equal(winograd_conv(tile, delta), tile[1:5, 1:5])


def test_winograd_rejects_other_filter_sizes():
    with pytest.raises(ValueError):
        winograd_conv(np.zeros((6, 6), np.float32), np.zeros((5, 5), np.float32))
    with pytest.raises(ValueError):
        winograd_conv(np.zeros((6, 6), np.float32), np.zeros((3, 3), np.float32), m=2)


def test_rational_winograd_equals_direct_on_random_tiles():
    rng = np.random.default_rng(4)
    for _ in range(20):
        ic = int(rng.integers(1, 4))
        tile = to_rational(rng.standard_normal((ic, 6, 6)).astype(np.float32))
        filt = to_rational(rng.standard_normal((ic, 3, 3)).astype(np.float32))
        got = winograd_conv(tile, filt)
        want = np.empty((4, 4), dtype=object)
        for i in range(4):
            for j in range(4):
                want[i, j] = sum((filt[c, u, v] * tile[c, i + u, j + v]
                                  for c in range(ic) for u in range(3) for v in range(3)), Fraction(0))
        assert np.array_equal(got, want)


def test_rational_winograd_backend_equals_exact_direct():
    net = small_conv_network(5, side=7)
    x = random_image(np.random.default_rng(5), (7, 7, 1))
    layer = net.layers[0]
    xr = to_rational(x.transpose(2, 0, 1))
    from fpgap.backends import conv_winograd
    wr, br = to_rational(layer.weight), to_rational(layer.bias)
    assert np.array_equal(conv_winograd(xr, wr, br, 1, "rat"), conv_direct(xr, wr, br, 1, "rat"))


def test_tile_geometry():
    assert tile_geometry("DIRECT_F32") == TileGeometry(0, 4)
    for b in ("IM2COL_F32", "PAIRWISE_F32", "REF_F64", "EXACT_RAT"):
        assert tile_geometry(b) == TileGeometry(0, 4)
    assert tile_geometry("WINOGRAD_F32") == TileGeometry(2, 4)
    assert tile_geometry("WINOGRAD_F32", 13, 9) == TileGeometry(4, 9)
    with pytest.raises(ValueError):
        TileGeometry(4, 4)


def test_inference_is_deterministic(demo_net, demo_dataset):
    x = demo_dataset.images[0]
    for b in F32_BACKENDS:
        first = infer(b, demo_net, x)
        for _ in range(3):
            assert np.array_equal(infer(b, demo_net, x.copy()).view(np.uint32), first.view(np.uint32))


def test_every_f32_backend_pair_diverges(demo_net):
    rng = np.random.default_rng(6)
    xs = [random_image(rng, demo_net.input_shape) for _ in range(100)]
    out = {b: [infer(b, demo_net, x) for x in xs] for b in F32_BACKENDS}
    for i, a in enumerate(F32_BACKENDS):
        for b in F32_BACKENDS[i + 1:]:
            assert any(not np.array_equal(p, q) for p, q in zip(out[a], out[b])), (a, b)


def test_first_layer_output():
    net = Network((2, 2, 1), [Flatten(), Dense(np.eye(4, dtype=np.float32), np.zeros(4, np.float32))])
    x = random_image(np.random.default_rng(7), (2, 2, 1))
    with pytest.raises(PreconditionError):
        first_layer_output("DIRECT_F32", net, x)
    conv_id = Network((2, 2, 1), [Conv2d(np.ones((1, 1, 1, 1), np.float32), np.zeros(1, np.float32)), Flatten(),
                                  Dense(np.eye(4, dtype=np.float32), np.zeros(4, np.float32))])
    assert np.array_equal(first_layer_output("IM2COL_F32", conv_id, x), x.transpose(2, 0, 1))
    with pytest.raises(ShapeError):
        infer("DIRECT_F32", conv_id, np.zeros((3, 2, 1), np.float32))


def test_ref_differs_from_im2col_on_dataset(demo_net, demo_dataset):
    assert any(not np.array_equal(first_layer_output("REF_F64", demo_net, x.astype(np.float64)),
                                  first_layer_output("IM2COL_F32", demo_net, x).astype(np.float64))
               for x in demo_dataset.images[:20])


def test_exact_matches_double_to_2_pow_minus_40(demo_net, demo_dataset):
    for x in demo_dataset.images[:3]:
        exact = first_layer_output("EXACT_RAT", demo_net, x)
        ref = first_layer_output("REF_F64", demo_net, x.astype(np.float64))
        for e, r in zip(exact.flat, ref.flat):
            assert abs(Fraction(float(r)) - e) <= Fraction(2) ** -40 * max(abs(e), Fraction(2) ** -40)


def _integer_network(rng):
    conv = Conv2d(rng.integers(-2, 3, (2, 1, 3, 3)).astype(np.float32), rng.integers(-2, 3, 2).astype(np.float32))
    dense = Dense(rng.integers(-2, 3, (3, 32)).astype(np.float32), rng.integers(-2, 3, 3).astype(np.float32))
    return Network((6, 6, 1), [conv, ReLU(), Flatten(), dense])


def test_quantized_backends_agree_on_integer_network():
    q = QuantizationScheme(1 / 64, 1 / 64, 2.0 ** -16)
    rng = np.random.default_rng(8)
    net = quantize_network(_integer_network(rng), q.s0, q.s1)
    for _ in range(1000):
        x = (rng.integers(0, 65, (6, 6, 1)) / 64).astype(np.float32)
        ref = quantized_infer(net, x, q, "DIRECT_F32")
        for b in F32_BACKENDS[1:]:
            assert np.array_equal(quantized_infer(net, x, q, b), ref)


def test_zero_network_gives_zero_logits():
    q = QuantizationScheme(1 / 64, 1 / 64, 2.0 ** -16)
    net = Network((6, 6, 1), [Conv2d(np.zeros((1, 1, 3, 3), np.float32), np.zeros(1, np.float32)), ReLU(),
                              Flatten(), Dense(np.zeros((2, 16), np.float32), np.zeros(2, np.float32))])
    x = (np.arange(36).reshape(6, 6, 1) / 64).astype(np.float32)
    for b in F32_BACKENDS:
        assert not np.any(quantized_infer(net, x, q, b))


def test_quantized_rejects_scheme_violations():
    q = QuantizationScheme(1 / 64, 1 / 64, 2.0 ** -16)
    net = _integer_network(np.random.default_rng(9))
    bad = net.replace_layer(0, Conv2d(net.layers[0].weight + np.float32(1 / 1024), net.layers[0].bias))
    x = np.zeros((6, 6, 1), np.float32)
    with pytest.raises(PreconditionError):
        quantized_infer(bad, x, q, "DIRECT_F32")
    with pytest.raises(PreconditionError):
        quantized_infer(net, x + np.float32(1 / 1024), q, "DIRECT_F32")
