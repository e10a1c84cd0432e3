"""The alignment objective and the sampler: per-token cosine loss with its
scale invariances, the joint objective, Euler integration oracles, and
classifier-free guidance.

Run:  python3 demos/04_alignment_and_sampling.py
"""

import numpy as np

from hieralign import Rng
from hieralign.alignment import ProjectionHead, align_loss, total_loss
from hieralign.autodiff import Tensor
from hieralign.backbone import interpolate, sample_euler
from hieralign.router import compose_target_batch

rng = Rng(0)

print("== per-token cosine loss anchors ==")
x = rng.normal((2, 16, 8))
print(f"loss(x, x)  = {float(align_loss(x, x).data):.2e}   (parallel -> 0)")
print(f"loss(x, -x) = {float(align_loss(x, -x).data):.6f} (antiparallel -> 2)")

print("\n== invariance to activation scales, and to joint beta rescale ==")
p = rng.normal((1, 16, 6))
v_mid, v_deep = rng.normal((1, 1, 16, 3)), rng.normal((1, 1, 16, 3))
beta = rng.uniform((1, 2), 0.2, 0.8)
ones = np.ones((1, 1))
z = compose_target_batch(v_mid, v_deep, ones, ones, beta)
base = float(align_loss(p, z).data)
print(f"base loss {base:.6f}")
print(f"|loss(7p, z) - base| = {abs(float(align_loss(7.0 * p, z).data) - base):.2e}")
z_scaled = compose_target_batch(v_mid, v_deep, ones, ones, 13.0 * beta)
print(f"|loss(p, 13*beta) - base| = {abs(float(align_loss(p, z_scaled).data) - base):.2e}")
z_ratio = compose_target_batch(v_mid, v_deep, ones, ones, beta * np.array([[3.0, 0.2]]))
print(f"|loss(p, ratio-shifted beta) - base| = "
      f"{abs(float(align_loss(p, z_ratio).data) - base):.2e}  (ratio matters)")

print("\n== projection head locality ==")
head = ProjectionHead(d_model=8, out_channels=6, rng=Rng(1), dtype=np.float64)
tokens = rng.normal((1, 64, 8))
out0 = head.project(Tensor(tokens)).data
bumped = tokens.copy()
bumped[0, 27] += 1.0  # cell (3, 3) of the 8x8 grid
changed = np.where(np.abs(head.project(Tensor(bumped)).data - out0).sum(-1)[0] > 1e-12)[0]
print(f"perturbing token 27 changes tokens {changed.tolist()} (its 3x3 neighborhood)")

print("\n== joint objective ==")
b = total_loss(0.5, 0.3, 2.0)
print(f"loss_total = {b.loss_total} = {b.loss_diff} + {b.lam} * {b.loss_align}")

print("\n== linear interpolant ==")
x0, eps = rng.normal((1, 2, 2, 2)), rng.normal((1, 2, 2, 2))
st = interpolate(x0, eps, 0.3)
print(f"x_t at t=0.3 deviates from (0.7 x + 0.3 eps) by "
      f"{np.max(np.abs(st.x_t - (0.7 * x0 + 0.3 * eps))):.2e}; v_target == eps - x: "
      f"{np.array_equal(st.v_target, eps - x0)}")

print("\n== Euler sampler oracles ==")


class ConstantField:
    supports_unconditional = True

    def velocity(self, x, t, labels=None):
        return np.full_like(x, 0.25)


for nfe in (1, 7, 250):
    out = sample_euler(ConstantField(), np.array([0]), nfe, 1.0, Rng(3), sample_shape=(1, 4, 4))
    eps = Rng(3).normal((1, 1, 4, 4))
    print(f"constant field, nfe={nfe:3d}: max |out - (eps - c)| = "
          f"{np.max(np.abs(out - (eps - 0.25))):.2e}")

x_star = rng.normal((1, 2, 3, 3))


class OnePoint:
    supports_unconditional = True

    def velocity(self, x, t, labels=None):
        return (x - x_star) / t


out = sample_euler(OnePoint(), np.array([0]), 50, 1.0, Rng(4), sample_shape=(2, 3, 3))
print(f"one-point analytic field, nfe=50: max |out - x*| = {np.max(np.abs(out - x_star)):.2e}")
