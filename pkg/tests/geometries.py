"""Seeded random Conv4D geometries shared by unit and acceptance tests."""

import numpy as np

from conv4dnet.conv4d import Conv4dParams, Conv4dSpec
from conv4dnet.nn import init_params


def random_case(seed, max_channels=4, max_extent=6, max_kernel=3, max_stride=2, max_pad=1,
                dtype=np.float32):
    rng = np.random.default_rng(seed)
    cin = int(rng.integers(1, max_channels + 1))
    cout = int(rng.integers(1, max_channels + 1))
    kernel = tuple(int(k) for k in rng.integers(1, max_kernel + 1, size=4))
    stride = tuple(int(s) for s in rng.integers(1, max_stride + 1, size=4))
    pad = tuple(int(p) for p in rng.integers(0, max_pad + 1, size=4))
    # every extent must admit at least one output position
    extents = tuple(int(rng.integers(max(1, k - 2 * p), max_extent + 1))
                    for k, p in zip(kernel, pad))
    n = int(rng.integers(1, 3))
    spec = Conv4dSpec(cin, cout, kernel, stride, pad)
    params = init_params("conv", spec, rng, dtype)
    params = Conv4dParams(params.weight, rng.uniform(-0.5, 0.5, cout).astype(dtype))
    x = rng.standard_normal((n, cin) + extents).astype(dtype)
    return spec, params, x
