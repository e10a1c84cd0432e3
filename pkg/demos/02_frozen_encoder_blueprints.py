"""The hierarchical prior source: pretrain a tiny autoencoder, partition its
layers into four groups, pool features onto the token grid, and render the
group-averaged PCA visualizations.

Run:  python3 demos/02_frozen_encoder_blueprints.py   (writes demos/out/)
"""

from pathlib import Path

import numpy as np

from hieralign import Rng
from hieralign.data import gen_synthetic_dataset, validate_crossover
from hieralign.diagnostics import pca_rgb
from hieralign.encoder import EncoderSpec, build_groups, encode_hierarchy, pretrain_and_freeze
from hieralign.ppm import write_ppm

out = Path(__file__).parent / "out"
ds = gen_synthetic_dataset(800, 8, 32, seed=1234, crossover_mode=True)
spec = EncoderSpec.desk_default()
partition = build_groups(spec)

print("== group partition (desk encoder) ==")
for g in partition.groups:
    marker = {partition.mid_id: "  <- mid", partition.deep_id: "  <- deep"}.get(g.id, "")
    print(f"{g.id}: {g.channels:3d} ch, res {g.native_resolution}, layers {g.layer_ids}{marker}")

print("\n== pretraining the autoencoder (2 epochs) ==")
result = pretrain_and_freeze(ds.images[:640], spec, epochs=2, rng=Rng(1),
                             holdout=ds.images[640:])
print(f"holdout reconstruction: {result.init_holdout_loss:.4f} -> {result.final_holdout_loss:.4f}")
print(f"frozen encoder hash: {result.content_hash[:16]}...")

print("\n== pooled feature bank ==")
bank = encode_hierarchy(result.encoder, partition, ds.images[:4], grid_side=8)
for gid in ("mid", "deep"):
    print(f"{gid}: tokens {bank.tokens(gid).shape}  (B, K, L, C)")

print("\n== class-information probe: deep should beat mid ==")
report = validate_crossover(ds, result.encoder, partition, grid_side=8)
print(f"auc_mid={report.auc_mid:.4f}  auc_deep={report.auc_deep:.4f}  gap={report.gap:+.4f}")

print("\n== PCA visualizations ==")
for i in range(3):
    bank_i = encode_hierarchy(result.encoder, partition, ds.images[i], grid_side=8)
    write_ppm(out / f"original_{i}.ppm", np.moveaxis(ds.images[i], 0, -1))
    for gid in (partition.mid_id, partition.deep_id):
        path = write_ppm(out / f"pca_{gid}_{i}.ppm", pca_rgb(bank_i, gid))
        print(f"wrote {path}")
