"""A walk through the tensor layer: build a tiny conv pipeline, take
gradients off the tape, and confirm them against central finite
differences.

Run:  python3 demos/01_autodiff_basics.py
"""

import numpy as np

from attrsearch import numerics as N
from attrsearch.numerics import GradientTape, Tensor

rng = np.random.default_rng(0)

# --- forward: conv -> relu -> spatial-sum pooling -> linear -> loss -------
image = Tensor(rng.random((8, 8, 1)).astype(np.float32))
kernels = Tensor((rng.normal(size=(3, 3, 1, 4)) * 0.5).astype(np.float32))
weights = Tensor((rng.normal(size=(4, 3)) * 0.5).astype(np.float32))

tape = GradientTape()
tape.register_parameter("kernels", kernels)
tape.register_parameter("weights", weights)

feat = N.relu(N.conv2d(image, kernels, stride=2, padding="same", tape=tape),
              tape=tape)
pooled = N.gap(feat, tape=tape)               # per-channel spatial sum
logits = N.matmul(pooled, weights, tape=tape)
loss = N.softmax_cross_entropy(logits, 2, tape=tape)
print(f"loss at init: {loss.item():.4f}  (uniform would be ln 3 = 1.0986)")

# --- backward --------------------------------------------------------------
grads = tape.backward(loss)
print(f"kernel gradient shape: {grads['kernels'].shape}, "
      f"|g|max = {np.abs(grads['kernels']).max():.4f}")

# --- the oracle: same loss, 64-bit, central differences --------------------
params = {"kernels": kernels.array.astype(np.float64),
          "weights": weights.array.astype(np.float64)}


def loss_fn(p, t):
    f = N.relu(N.conv2d(Tensor(image.array, dtype=np.float64), p["kernels"],
                        stride=2, padding="same", tape=t), tape=t)
    lg = N.matmul(N.gap(f, tape=t), p["weights"], tape=t)
    return N.softmax_cross_entropy(lg, 2, tape=t)


for name in params:
    err = N.finite_difference_check(loss_fn, params, name, epsilon=1e-4)
    print(f"finite-difference check on {name}: max relative error {err:.2e}")

# --- one descent step ------------------------------------------------------
new_params = N.sgd_step(tape.parameters, grads.by_name, learning_rate=0.05)
tape2 = GradientTape()
feat2 = N.relu(N.conv2d(image, new_params["kernels"], stride=2,
                        padding="same", tape=tape2), tape=tape2)
logits2 = N.matmul(N.gap(feat2, tape=tape2), new_params["weights"],
                   tape=tape2)
loss2 = N.softmax_cross_entropy(logits2, 2, tape=tape2)
print(f"loss after one SGD step: {loss2.item():.4f} (was {loss.item():.4f})")
