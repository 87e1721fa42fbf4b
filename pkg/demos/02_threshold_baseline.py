"""
Thresholding baseline
=====================

Otsu threshold, open/close, connected components. It works on clean frames and
falls apart once parts overlap or the image is blurred, which is the gap a
learned segmenter is meant to close.
"""
from fluoroseg.coco import dataset_from_samples
from fluoroseg.evaluation import evaluate, render_table
from fluoroseg.segmenters import ThresholdBackend, segment
from fluoroseg.synth import SceneGeometry, generate_dataset

backend = ThresholdBackend()
geometry = SceneGeometry.default(256)

for mix in ({"clean": 1.0}, {"overlap": 1.0}, {"blur": 1.0}, {"combo": 1.0}):
    samples = generate_dataset(20, mix, seed=1, geometry=geometry)
    truth = dataset_from_samples(samples)
    preds = {i + 1: segment(backend, s.image) for i, s in enumerate(samples)}
    # the baseline cannot tell femur from tibia, so both sides are merged into one class
    report = evaluate(preds, truth, class_agnostic=True)
    print(f"--- {list(mix)[0]} ---")
    print(render_table(report))
    print()
