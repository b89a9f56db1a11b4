"""
Stitch points of the Small ResNet family
========================================

Every Small ResNet has a stem plus four stages of one or two residual
blocks. A stitch point is a cut after the stem (index 0) or after a block.
"""

import torch

from stitchlab import ArchSpec, build_model, enumerate_archs, forward_prefix, forward_suffix, stitch_points

# The family has sixteen members, from R1111 (ResNet10) to R2222 (ResNet18).
archs = enumerate_archs()
print(len(archs), "architectures:", " ".join(a.name for a in archs))

# The shape table depends only on the stage each cut falls in.
for name in ("R1111", "R1212", "R2222"):
    arch = ArchSpec.parse(name)
    print(name, [tuple(p.shape) for p in stitch_points(arch)])

# Running a prefix then the matching suffix reproduces the full forward pass.
model = build_model(ArchSpec.parse("R1212"), seed=0)
x = torch.randn(2, 3, 32, 32)
with torch.no_grad():
    full = model(x)
    for j in range(model.arch.num_blocks + 1):
        h = forward_prefix(model, j, x)
        same = torch.equal(forward_suffix(model, j, h), full)
        print(f"cut {j}: activation {tuple(h.shape[1:])}, recomposed exactly: {same}")
