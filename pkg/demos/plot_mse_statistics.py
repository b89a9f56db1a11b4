"""
Comparing vanilla and similarity-trained stitches
=================================================

A vanilla stitch is trained on the task loss; a similarity-trained stitch
regresses the receiver's own activation directly. The mean squared error
between the expected activation (E), the vanilla output (V) and the
similarity output (S) shows how far apart they end up.
"""

from stitchlab import ArchSpec, Hyperparams, build_model, make_synthetic, plan_stitch, train_network
from stitchlab.experiments import StitchPair, mse_statistics
from stitchlab.stitching import assemble, build_stitch, stitch_between
from stitchlab.training import train_stitch_similarity, train_stitch_task

train, test = make_synthetic(512, seed=0), make_synthetic(128, seed=1, role="test")
hp = Hyperparams(batch_size=64, epochs=3)
arch = ArchSpec.parse("R1111")
sender = train_network(build_model(arch, 0), train, test, hp)
receiver = train_network(build_model(arch, 1), train, test, hp)

pairs = []
for i, j in [(1, 1), (2, 2), (3, 2)]:
    vanilla, report = train_stitch_task(stitch_between(sender, i, receiver, j), train, test, hp)
    spec = plan_stitch(vanilla.stitch.spec.in_shape, vanilla.stitch.spec.out_shape)
    stitch, _ = train_stitch_similarity(sender, i, receiver, j, build_stitch(spec), train, hp)
    pairs.append(StitchPair(vanilla, assemble(sender, i, receiver, j, stitch)))
    print(f"({i}, {j}) vanilla accuracy {report.final_accuracy:.3f}")

for scope, table in mse_statistics(pairs, test).items():
    print(scope)
    print(table.to_csv())
