"""
Checking hand-written gradients
===============================

Every backward pass in the package is written by hand, so each one is
compared against central finite differences in double precision.
"""

import numpy as np

from csrcnn import layers as L
from csrcnn.model import gradcheck_cascade, prelu_input_margin, toy_gradcheck_problem

# A single 3x3 convolution under a random linear probe loss
p = L.LayerParams.conv(2, 3, 3, np.float64)
L.msra_init(p, 0)
x = np.random.default_rng(0).standard_normal((1, 2, 5, 5))
print("conv   max rel err", L.gradcheck_layer(p, x))

# The x2 transposed convolution that ends each stage
q = L.LayerParams.deconv(3, 1, 9, 2, dtype=np.float64)
L.msra_init(q, 1)
print("deconv max rel err", L.gradcheck_layer(q, x[:, :1].repeat(3, axis=1)))

# PReLU and L1 both have kinks. The toy cascade is built so every activation
# input and every residual sits well away from zero.
model, x, targets = toy_gradcheck_problem(seed=0)
print("smallest |PReLU input|", prelu_input_margin(model, x))
print("cascade max rel err", gradcheck_cascade(model, x, targets))
