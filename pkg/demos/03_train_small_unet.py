"""
Training the lightweight UNet on a few frames
=============================================

Everything here is plain numpy: im2col convolutions, a weighted softmax
cross entropy, and SGD. We overfit three synthetic frames with a narrow
network to watch the loss fall and the point IOU rise.
"""

import os
import tempfile

from volmap import metrics, nn, synthgen, volmapnet
from volmap.geometry import fuse
from volmap.labeler import class_frequencies
from volmap.voxelizer import GridConfig, cell_ground_truth, voxelize

grid_cfg = GridConfig((-16, 16), (-12, 12), 0.4, 0.4, 8)
clouds = [fuse(synthgen.generate(synthgen.random_scene(s, x_range=(-14, 14), y_range=(-10, 10))))
          for s in (2, 3, 4)]

###############################################################################
# Rare classes weigh more: w = 1 / ln(1.02 + f).
stats = class_frequencies(clouds, 3)
weights = nn.class_weights(stats)
print("frequencies", [round(f, 3) for f in stats.frequencies], "-> weights", weights.round(2))

dataset = []
for c in clouds:
    g = voxelize(c, grid_cfg)
    dataset.append((g, cell_ground_truth(g, c, stats)))

###############################################################################
# base_channels=8 keeps each epoch well under a second.
params = volmapnet.init_params(volmapnet.NetConfig(8, 3, base_channels=8), seed=0)


def evaluate():
    cm = metrics.ConfusionMatrix(3)
    for c in clouds:
        metrics.accumulate(cm, c, volmapnet.infer(c, params, grid_cfg))
    return metrics.iou(cm)


def progress(epoch, loss):
    if (epoch + 1) % 30 == 0:
        print(f"epoch {epoch + 1:3d}  loss {loss:.3f}  IOU", {k: round(v, 3) for k, v in evaluate().items()})


hyper = volmapnet.TrainConfig(epochs=150, lr=5e-3, batch_size=3, seed=0)
_, history = volmapnet.train(dataset, params, hyper, weights, progress=progress)

###############################################################################
# The weight file is a JSON manifest plus raw float32 blobs; saving a
# loaded model reproduces the file byte for byte.
with tempfile.TemporaryDirectory() as tmp:
    a, b = os.path.join(tmp, "a.vmp"), os.path.join(tmp, "b.vmp")
    volmapnet.save(params, a)
    volmapnet.save(volmapnet.load(a), b)
    print("weights:", os.path.getsize(a), "bytes, identical after reload:", open(a, "rb").read() == open(b, "rb").read())
