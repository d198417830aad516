"""Random tiny networks and other shared test fixtures."""

import numpy as np

from fpgap.backends import infer
from fpgap.core import Conv2d, Dense, Flatten, Network, PerturbationSet, ReLU
from fpgap.verifier import affine_layers, interval_bounds


def tiny_network(seed: int, k: int = 2, max_unstable: int = 10):
    """Two hidden dense layers on a 2x2 image with 1..max_unstable unstable ReLUs.

    Returns ``(net, region, t0, n_unstable)`` with ``t0`` the REF_F64 class of
    the centre.
    """
    rng = np.random.default_rng(seed)
    while True:
        h1, h2 = int(rng.integers(3, 7)), int(rng.integers(2, 5))

        def dense(rows, cols):
            return Dense(rng.standard_normal((rows, cols)).astype(np.float32),
                         (rng.standard_normal(rows) * 0.3).astype(np.float32))

        net = Network((2, 2, 1), [Flatten(), dense(h1, 4), ReLU(), dense(h2, h1), ReLU(), dense(k, h2)])
        x0 = rng.random((2, 2, 1)).astype(np.float32)
        region = PerturbationSet(x0, float(rng.choice([0.05, 0.1, 0.2])))
        n_unstable = interval_bounds(net, region).num_unstable(affine_layers(net))
        if 1 <= n_unstable <= max_unstable:
            t0 = int(np.argmax(infer("REF_F64", net, x0.astype(np.float64))))
            return net, region, t0, n_unstable


def small_conv_network(seed: int, side: int = 6, k: int = 3) -> Network:
    rng = np.random.default_rng(seed)
    c1 = Conv2d((rng.standard_normal((2, 1, 3, 3)) * 0.5).astype(np.float32),
                (rng.standard_normal(2) * 0.1).astype(np.float32), padding=1)
    dense = Dense((rng.standard_normal((k, 2 * side * side)) * 0.2).astype(np.float32),
                  (rng.standard_normal(k) * 0.1).astype(np.float32))
    return Network((side, side, 1), [c1, ReLU(), Flatten(), dense])


def random_image(rng, shape) -> np.ndarray:
    return rng.random(shape).astype(np.float32)
