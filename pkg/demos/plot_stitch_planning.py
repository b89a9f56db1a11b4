"""
Planning stitches between mismatched shapes
===========================================

A stitch maps a sender activation onto the receiver's activation shape.
Equal resolutions get a 1x1 projection, larger senders a strided k x k
convolution, smaller senders a nearest upsample followed by a 1x1 conv.
"""

import torch

from stitchlab import ArchSpec, build_model, plan_stitch
from stitchlab.stitching import mean_pool, nearest_upsample, num_parameters, stitch_between

for src, dst in [((64, 32, 32), (64, 32, 32)), ((64, 32, 32), (256, 8, 8)), ((512, 4, 4), (64, 32, 32))]:
    spec = plan_stitch(src, dst)
    print(f"{src} -> {dst}: {spec.kind}, factor {spec.factor}, kernel {spec.kernel_size}")

# Upsampling copies each value into a k x k block, so pooling undoes it exactly.
x = torch.randn(1, 4, 4, 4)
print("upsample then pool is lossless:", torch.equal(mean_pool(nearest_upsample(x, 8), 8), x))

# Stitching a network into itself at the same cut starts as the identity.
model = build_model(ArchSpec.parse("R1111"), seed=0)
net = stitch_between(model, 2, model, 2)
x = torch.randn(4, 3, 32, 32)
with torch.no_grad():
    print("identity stitch keeps logits:", torch.equal(net(x), model(x)))

# Only the stitch is trainable; both networks are frozen.
a, b = build_model(ArchSpec.parse("R1111"), 0), build_model(ArchSpec.parse("R2222"), 1)
net = stitch_between(a, 4, b, 1)
print("trainable parameters:", num_parameters(net.stitch), "frozen digest:", net.frozen_digest[:12])
