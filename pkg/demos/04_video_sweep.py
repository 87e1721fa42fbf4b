"""
Segmenting a flexion sweep
==========================

A knee bends from 0 to 120 degrees over 60 frames. Frames are written as
numbered PGMs, segmented in order and overlaid (femur red, tibia blue; the
class-agnostic baseline shows green). Pass a checkpoint from 03_train_proto.py
to use the learned model instead of the threshold baseline.

Usage: python 04_video_sweep.py [checkpoint.fseg]
"""
import sys
from pathlib import Path

from fluoroseg.netpbm import write_pgm
from fluoroseg.segmenters import ProtoBackend, ProtoModel, ThresholdBackend
from fluoroseg.synth import flexion_sweep
from fluoroseg.video import FrameSource, run_video, summary_text

frames = Path("demo_out/sweep")
frames.mkdir(parents=True, exist_ok=True)
size = 128 if len(sys.argv) > 1 else 256  # the demo model is trained at 128 px
for i, s in enumerate(flexion_sweep(60, size=size, seed=3)):
    write_pgm(frames / f"{i:03d}.pgm", s.image)

backend = ProtoBackend(ProtoModel.load(sys.argv[1])) if len(sys.argv) > 1 else ThresholdBackend()
run = run_video(FrameSource.open(frames), backend, "demo_out/sweep_result", overlay_frames=True, workers=2)
print(summary_text(run.report, backend.name, failed=len(run.errors)))
print(f"overlays in demo_out/sweep_result/overlays, detections in {run.results_path}")
