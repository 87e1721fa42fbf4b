"""
Training the prototype-mask segmenter
=====================================

A three-stage conv net predicts, per 8x8 cell, class logits, a box and mask
coefficients; a small protonet produces 8 prototype maps that the coefficients
mix into instance masks. Everything runs on the numpy autograd in
``fluoroseg.tensor``.

Usage: python 03_train_proto.py [iterations]   (default 300, about a minute)
"""
import sys
import time

import numpy as np

from fluoroseg.coco import dataset_from_samples, split_train_test
from fluoroseg.evaluation import evaluate, render_table
from fluoroseg.segmenters import ProtoBackend, ProtoModel, TrainConfig, segment, train
from fluoroseg.synth import SceneGeometry, generate_dataset

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 300

samples = generate_dataset(250, {"clean": 1.0}, seed=11, geometry=SceneGeometry.default(128))
ds = dataset_from_samples(samples)
images = {i + 1: s.image for i, s in enumerate(samples)}
train_ds, test_ds = split_train_test(ds, 0.8, seed=0)
print(f"{len(train_ds.images)} training images, {len(test_ds.images)} held out")

cfg = TrainConfig(iterations=iterations, batch_size=4, lr=0.01, seed=0)
t0 = time.perf_counter()
model, trace = train(ProtoModel.init(cfg.seed), train_ds, images, cfg, log_every=50)
print(f"trained in {time.perf_counter() - t0:.0f} s; loss {np.mean(trace[:50]):.3f} -> {np.mean(trace[-50:]):.3f}")

backend = ProtoBackend(model)
preds = {im.id: segment(backend, images[im.id]) for im in test_ds.images}
print(render_table(evaluate(preds, test_ds)))

model.save("proto_demo.fseg")
print("checkpoint: proto_demo.fseg")
