"""
A similarity matrix and its triangle statistic
==============================================

Train a vanilla stitch for every pair of cuts between two networks and
record the stitched test accuracy. This runs on the synthetic fixture,
whose classes are almost linearly separable from late activations, so
stitches into the last receiver cuts do well from any sender and no
triangle should be expected here. The CLI runs the same sweep on CIFAR-10.
"""

from pathlib import Path

from stitchlab import ArchSpec, Hyperparams, build_model, make_synthetic, train_network
from stitchlab.experiments import similarity_matrix, triangle_stat
from stitchlab.reporting import plot_matrix

train, test = make_synthetic(256, seed=0), make_synthetic(128, seed=1, role="test")
hp = Hyperparams(batch_size=64, epochs=6)

# Two independently trained copies of the smallest network.
arch = ArchSpec.parse("R1111")
sender = train_network(build_model(arch, 0), train, test, hp)
receiver = train_network(build_model(arch, 1), train, test, hp)
print("base accuracies:", sender.test_accuracy, receiver.test_accuracy)

matrix = similarity_matrix(sender, receiver, train, test, hp.replace(epochs=2, learning_rate=0.05))
print(matrix.to_csv())

stat = triangle_stat(matrix)
print(f"lower triangle {stat.lower_mean:.3f}, upper {stat.strict_upper_mean:.3f}, gap {stat.gap:.3f}")

out = Path("demo_output")
print("heatmap written to", plot_matrix(matrix.entries, out / "R1111__R1111.png", title="synthetic R1111 -> R1111"))
