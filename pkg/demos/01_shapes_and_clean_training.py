"""
Shapes world and a clean segmentation model
===========================================

Generate the synthetic dataset, look at what one image contains, then train
SegNetTiny with plain gradient descent and report validation mIoU.

Run:  python demos/01_shapes_and_clean_training.py [epochs]
"""
import sys

import numpy as np

from eroseg import data, metrics, training
from eroseg.model import predict_labels

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 30

# Every image is grey background plus up to three non-overlapping shapes:
# rectangles (1), disks (2), diamonds (3). The colours differ from the
# background by under 0.1 per channel while the noise is +-0.1, so a single
# pixel says little on its own.
train = data.generate(seed=100, n=256, h=32, w=32)
val = data.generate(seed=200, n=64, h=32, w=32, split="val")

print("first image holds", train.shapes[0])
print("class frequencies:", np.bincount(train.labels.ravel(), minlength=4) / train.labels.size)

# Default config: 30 epochs, batch 16, lr 0.1, seeded shuffle.
model, history = training.train_clean(train, training.TrainConfig(epochs=epochs))
for row in history[::5] + history[-1:]:
    print(f"epoch {row.epoch:3d}  loss {row.clean_loss:.4f}  train mIoU {row.clean_miou:.3f}")

cm = training.clean_confusion(model, val)
print("\n".join(metrics.iou_csv_rows(cm)))

# The prediction for one validation image, as a character map.
pred = predict_labels(model, val.images[:1])[0]
for row in pred[::2]:
    print("".join(".RDV"[v] for v in row[::2]))
