"""The compute substrate: reverse-mode autodiff on numpy arrays, checked
against the central-difference oracle, plus per-sample gradients.

Run:  python3 demos/01_autodiff_and_gradient_oracle.py
"""

import numpy as np

from hieralign import ParamSet, Rng, Tensor, finite_diff_grad, grad, per_sample_grads
from hieralign import autodiff as ad

rng = Rng(0)

print("== a scalar chain rule ==")
w = Tensor(np.array(3.0), requires_grad=True)
params = ParamSet([("w", w)])
loss = w * w
print(f"d(w^2)/dw at w=3: analytic {grad(loss, params)['w']}, expected 6")

print("\n== a small cosine objective vs finite differences ==")
p = Tensor(rng.normal((4, 8)), requires_grad=True)
z = Tensor(rng.normal((4, 8)))
params = ParamSet([("p", p)])


def cosine_loss():
    dots = ad.tsum(p * z, axis=-1)
    norms = ad.sqrt(ad.tsum(p * p, axis=-1)) * ad.sqrt(ad.tsum(z * z, axis=-1))
    return ad.tmean(1.0 - dots / norms)


analytic = grad(cosine_loss(), params)["p"]
numeric = finite_diff_grad(cosine_loss, params, h=1e-6)["p"]
rel = np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric)
print(f"relative error analytic vs central differences: {rel:.2e}")

print("\n== per-sample gradients of a least-squares model ==")
w = Tensor(np.array([0.5, -1.0, 0.25]), requires_grad=True)
params = ParamSet([("w", w)])
xs, ys = rng.normal((6, 3)), rng.normal((6,))


def sample_loss(i):
    pred = ad.reshape(ad.matmul(Tensor(xs[i : i + 1]), ad.reshape(w, (3, 1))), ())
    r = pred - float(ys[i])
    return 0.5 * r * r


batch = per_sample_grads(sample_loss, range(6), params)
print(f"gradient rows: {batch.per_sample.shape}, covering {batch.param_subset}")
closed_form = (xs @ w.data - ys)[:, None] * xs
print(f"max |row - closed form|: {np.max(np.abs(batch.per_sample - closed_form)):.2e}")
print("mean of rows vs batch gradient:",
      np.allclose(batch.per_sample.mean(axis=0),
                  grad(sum((sample_loss(i) for i in range(1, 6)), sample_loss(0)) * (1 / 6),
                       params)["w"], rtol=1e-9))
