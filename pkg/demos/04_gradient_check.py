"""
Checking the hand-written gradients
===================================

Every layer's backward pass is compared against central differences in
float64. Leaky-relu and the L1 loss have kinks, so the checker shrinks the
step for any element whose perturbation crosses one.
"""

import numpy as np

from fusionbooster.autodiff import Conv2d, LeakyReLU, Sequential, Sigmoid, Tensor4, grad_check
from fusionbooster.booster import ProbeUnit

rng = np.random.default_rng(1)
x = Tensor4(rng.normal(size=(1, 2, 8, 8)))

nets = {
    "conv": [Conv2d(2, 1, rng)],
    "conv + leaky relu + conv": [Conv2d(2, 3, rng), LeakyReLU(0.2), Conv2d(3, 1, rng)],
    "conv + sigmoid": [Conv2d(2, 1, rng), Sigmoid()],
}
for name, layers in nets.items():
    print(f"{name:<28} max relative error {grad_check(Sequential(layers), x):.2e}")

# the full probe unit: four convs, three leaky relus and a sigmoid
probe = ProbeUnit(rng)
small = Tensor4(rng.uniform(size=(1, 1, 6, 6)))
print(f"{'probe unit':<28} max relative error {grad_check(probe, small):.2e}")
