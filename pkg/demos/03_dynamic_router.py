"""The timestep-conditioned router: linear time embedding, intra-group
softmax weights, inter-group sigmoid scales, baseline schedules, and the
piecewise-constant lookup-table variant.

Run:  python3 demos/03_dynamic_router.py
"""

import numpy as np

from hieralign import Rng
from hieralign.diagnostics import trace_router
from hieralign.router import (
    DynamicRouter,
    LutRouter,
    RoutingPolicy,
    aggregate_group,
    compose_target,
    schedule_baseline,
)

router = DynamicRouter(k_mid=2, k_deep=2, rng=Rng(0))
print("== zero-initialized output layer: neutral policy at every t ==")
for t in (0.0, 0.5, 1.0):
    out = router.route(t)
    print(f"t={t}: alpha logits {out.alpha_logits_mid} {out.alpha_logits_deep}, "
          f"beta logits {out.beta_logits}")

print("\n== time embedding is affine: e(0.5) == (e(0) + e(1)) / 2 ==")
e0, e1, eh = (router.embed_time(t).data[0] for t in (0.0, 1.0, 0.5))
print("max deviation:", np.max(np.abs(eh - (e0 + e1) / 2)))

print("\n== softmax aggregation of a feature stack ==")
stack = Rng(1).normal((2, 4, 3))  # K=2 layers, L=4 tokens, C=3 channels
v = aggregate_group(stack, np.array([np.log(2.0), 0.0]))
print("weights (2/3, 1/3); max dev from direct sum:",
      np.max(np.abs(v - (2 / 3 * stack[0] + 1 / 3 * stack[1]))))

print("\n== composed target: sigmoid scales then channel concat ==")
target = compose_target(np.ones((4, 3)), 2 * np.ones((4, 2)), np.array([0.0, 50.0]))
print(f"beta = {target.beta}, tokens shape {target.tokens.shape}, "
      f"first-mid channel {target.tokens[0, 0]:.3f}, first-deep {target.tokens[0, 3]:.3f}")

print("\n== baseline schedules ==")
for kind in ("static_uniform", "linear_heuristic"):
    betas = [schedule_baseline(kind, t, 2, 2)[2] for t in (0.0, 0.5, 1.0)]
    print(f"{kind}: beta at t=0,0.5,1 -> {[b.tolist() for b in betas]}")

print("\n== continuity: MLP vs lookup table across a bin boundary ==")
lut = LutRouter(2, 2, bins=10, table=Rng(2).normal((10, 6)), dtype=np.float64)
mlp_jump = np.abs(router.route(0.9001).beta_logits - router.route(0.8999).beta_logits).max()
lut_jump = np.abs(lut.route(0.9001).beta_logits - lut.route(0.8999).beta_logits).max()
print(f"|delta| across t=0.9: mlp {mlp_jump:.2e} (continuous), lut {lut_jump:.2e} (step)")

print("\n== policy traces on a grid ==")
grid = np.linspace(0, 1, 5)
for kind in ("linear_heuristic", "static_uniform"):
    trace = trace_router(RoutingPolicy(kind, 2, 2), grid)
    print(f"{kind}: beta_deep over {grid.tolist()} = {trace.beta[:, 1].tolist()}")
