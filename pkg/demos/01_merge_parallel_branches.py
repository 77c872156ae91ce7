"""
Merging parallel convolution branches into one kernel
=====================================================

A bundle of convolutions that share an output grid (same stride, odd
kernels no wider than the base) collapses into a single convolution:
pad every kernel to the base size, expand finer groupings to the common
one, and sum. This script builds a few bundles by hand and checks the
collapsed kernel against the sum of branch outputs.
"""

import numpy as np

from fmvit import tensor as T
from fmvit.tensor import ConvSpec, Tensor
from fmvit.reparam import (expand_groups, fold_identity_branch,
                           merge_parallel_branches, pad_kernel)

rng = np.random.default_rng(0)

# -- a 3x3 + 1x1 pair, the classic case -------------------------------------

base = ConvSpec(8, 8, 3, 3, stride=1, groups=1, has_bias=False)
point = ConvSpec(8, 8, 1, 1, stride=1, groups=1, has_bias=False)

w3 = rng.standard_normal(base.weight_shape) * 0.2
w1 = rng.standard_normal(point.weight_shape) * 0.2

x = Tensor(rng.standard_normal((1, 8, 16, 16)).astype(np.float32))
separate = T.add(T.conv2d(x, base, Tensor(w3.astype(np.float32))),
                 T.conv2d(x, point, Tensor(w1.astype(np.float32))))

fused_spec, w, b = merge_parallel_branches(base, [(base, w3, None), (point, w1, None)])
merged = T.conv2d(x, fused_spec, Tensor(w.astype(np.float32)))

print("3x3 + 1x1 merge")
print("  fused kernel shape:", w.shape)
print("  max |separate - merged| =", float(np.abs(separate.data - merged.data).max()))
print()

# -- padding and group expansion shown on their own --------------------------

# a 1x1 kernel padded to 3x3 lands in the center tap
print("1x1 padded into a 3x3:")
print(pad_kernel(np.ones((1, 1, 1, 1)), 3, 3)[0, 0])
print()

# a depthwise (groups=C) kernel rewritten at groups=1 is block-diagonal:
# each output channel only reads its own input channel
dw = ConvSpec(4, 4, 3, 3, stride=1, groups=4, has_bias=False)
wd = rng.standard_normal(dw.weight_shape)
wide = expand_groups(wd, from_groups=4, to_groups=1, in_c=4, out_c=4)
print("depthwise kernel at groups=1 has shape", wide.shape,
      "and", int((wide != 0).sum()), "nonzeros out of", wide.size)
print()

# -- the identity shortcut is itself a convolution ---------------------------

# a Dirac kernel: channel i reads channel i at the center tap, so adding
# the input back is just one more branch in the sum
ident = fold_identity_branch(4, ConvSpec(4, 4, 3, 3, stride=1, groups=1, has_bias=False))
ident = pad_kernel(ident, 3, 3)
print("identity as a 3x3 kernel, center taps:", ident[:, :, 1, 1].diagonal())
print()

# -- a grouped, biased, mixed-kernel bundle ----------------------------------

base = ConvSpec(8, 16, 5, 5, stride=2, groups=2, has_bias=True)
branches = []
for spec in (base,
             ConvSpec(8, 16, 3, 3, stride=2, groups=4, has_bias=False),
             ConvSpec(8, 16, 1, 1, stride=2, groups=8, has_bias=True)):
    wb = rng.standard_normal(spec.weight_shape) * 0.2
    bb = rng.standard_normal(spec.out_channels) * 0.1 if spec.has_bias else None
    branches.append((spec, wb, bb))

acc = None
for spec, wb, bb in branches:
    y = T.conv2d(x, spec, Tensor(wb.astype(np.float32)),
                 Tensor(bb.astype(np.float32)) if bb is not None else None)
    acc = y if acc is None else T.add(acc, y)

fused_spec, w, b = merge_parallel_branches(base, branches)
merged = T.conv2d(x, fused_spec, Tensor(w.astype(np.float32)), Tensor(b.astype(np.float32)))

print("grouped 5x5/3x3/1x1 bundle, stride 2, mixed bias")
print("  fused spec: groups =", fused_spec.groups, " kernel =",
      (fused_spec.kernel_h, fused_spec.kernel_w), " bias =", fused_spec.has_bias)
print("  max |sum of branches - merged| =",
      float(np.abs(acc.data - merged.data).max()))
