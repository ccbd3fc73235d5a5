"""Shared-state token mixing ignores scan order, and a VSSD backbone sees the whole image.

Run: python3 demos/scan_order_and_erf.py
"""

import numpy as np

from ggnn_iml.tensor import Tensor, conv2d
from ggnn_iml.vssd import BackboneConfig, SsdTokenParams, VSSDBackbone, compute_erf, nc_ssd_aggregate


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


rng = np.random.default_rng(0)
L, N, d = 16, 4, 3
x = rng.normal(size=(L, d))
a_bar, b_bar, c = rng.uniform(0.5, 2.0, L), rng.normal(size=(L, N)), rng.normal(size=(L, N))
y = nc_ssd_aggregate(t64(x), SsdTokenParams(t64(a_bar), t64(b_bar), t64(c))).data

perm = rng.permutation(L)
y_perm = nc_ssd_aggregate(t64(x[perm]), SsdTokenParams(t64(a_bar[perm]), t64(b_bar[perm]), t64(c[perm]))).data
print(f"shuffled tokens, max |difference| after un-shuffling: {np.abs(y_perm - y[perm]).max():.1e}")

probes = [rng.uniform(size=(3, 32, 32)) for _ in range(4)]
backbone = VSSDBackbone(BackboneConfig(), rng=np.random.default_rng(1), dtype=np.float64)
erf = compute_erf(lambda im: backbone(im)[0], probes)
print(f"VSSD stage-1 ERF: {np.count_nonzero(erf)}/{erf.size} pixels nonzero, min/max {erf.min() / erf.max():.1e}")

kernels = [t64(rng.normal(size=(3, 3, 3, 3))) for _ in range(3)]


def cnn(im):
    for k in kernels:
        im = conv2d(im, k, padding=1).relu()
    return im


cnn_erf = compute_erf(cnn, probes)
rows, cols = np.nonzero(cnn_erf)
print(f"3-layer 3x3 CNN ERF: {np.count_nonzero(cnn_erf)} pixels nonzero, "
      f"rows {rows.min()}..{rows.max()}, cols {cols.min()}..{cols.max()}")
