"""
Parameter, MAC, and shape accounting across the model family
============================================================

Five variants share one skeleton: a three-conv stem at quarter
resolution, two conv-mixing stages, then two stages that interleave
frequency-mixing blocks, at H/4, H/8, H/16, H/32. The analyzer walks
a forward pass with hooks, so the table reflects the model as it runs.
"""

from fmvit import build_model, count_flops, count_params, fuse_model, shape_trace, variant_names

print(f"{'variant':<8} {'train params':>13} {'deployed':>11} {'GMACs@224':>10}")
for name in variant_names():
    model = build_model(name, classes=1000, seed=0)
    fused = fuse_model(model)
    train_p = count_params(model).total_params
    dep_p = count_params(fused).total_params
    macs = count_flops(fused, (1, 3, 224, 224)).total_macs
    print(f"{name:<8} {train_p:>13,} {dep_p:>11,} {macs / 1e9:>10.3f}")
print()

# stage-by-stage view of the smallest variant
model = fuse_model(build_model("T", classes=1000, seed=0))
print("T, deployed, stage outputs at 224x224 input:")
trace = dict(shape_trace(model, (1, 3, 224, 224)))
print(f"  {'stem':<10} -> {trace['stem']}")
for i in range(4):
    print(f"  stages.{i:<3} -> {trace[f'stages.{i}']}")
print(f"  {'head':<10} -> {trace['head']}")
print()

# where the MACs go: top rows of the per-module breakdown
report = count_flops(model, (1, 3, 224, 224))
print("T, heaviest modules by MACs:")
rows = sorted(report.rows, key=lambda r: -r.macs)[:8]
for r in rows:
    print(f"  {r.macs / 1e6:>8.1f}M  {r.kind:<10} {r.path}")
print()
print("convention:", report.convention)
