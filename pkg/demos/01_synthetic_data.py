"""
Synthetic knee fluoroscopy
==========================

Render one sample of every scenario class and tile them into a contact sheet.
Output goes to ``demo_out/`` (or the directory given as the first argument).
"""
import sys
from pathlib import Path

import numpy as np

from fluoroseg.netpbm import write_pgm, write_ppm
from fluoroseg.synth import SCENARIO_CLASSES, SceneGeometry, generate_sample

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)
geometry = SceneGeometry.default(256)

# one image per class; every sample has its own sub-seed, so index and seed fix it completely
tiles = []
for i, kind in enumerate(SCENARIO_CLASSES):
    s = generate_sample(i, seed=42, mix={kind: 1.0}, geometry=geometry)
    write_pgm(out / f"scenario_{kind}.pgm", s.image)
    print(f"{kind:10s} flexion {s.flexion_deg:5.1f} deg, parts: {[p.category for p in s.parts]}")

    # ground truth drawn as coloured outlines next to the image
    rgb = np.repeat(s.image[..., None], 3, axis=2)
    for p in s.parts:
        edge = p.mask & ~np.roll(p.mask, 1, 0) | p.mask & ~np.roll(p.mask, 1, 1)
        rgb[edge] = (255, 0, 0) if p.category == "femur" else (0, 0, 255)
    tiles.append(rgb)

# 7 tiles -> pad to 8 and lay out 2 x 4
tiles.append(np.zeros_like(tiles[0]))
sheet = np.vstack([np.hstack(tiles[:4]), np.hstack(tiles[4:])])
write_ppm(out / "scenarios.ppm", sheet)
print(f"contact sheet: {out / 'scenarios.ppm'}")
