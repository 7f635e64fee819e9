"""Feature walk-through: LAB codes, SURF patches, and SIFT descriptors
computed on one procedurally rendered face."""

import numpy as np

from funnelcascade.features import (
    compute_lab_map,
    default_surf_pool,
    shape_indexed_features,
    sift_descriptor,
    surf_descriptor,
)
from funnelcascade.imaging import WindowRect, integral_image
from funnelcascade.synthetic import render_face

rng = np.random.default_rng(0)
face, shape, yaw = render_face(rng, yaw_deg=25.0)
print(f"rendered a {face.shape} face at yaw {yaw:.1f} deg")
print("landmarks (normalized):")
for name, (x, y) in zip(("left eye", "right eye", "nose", "mouth"), shape.points):
    print(f"  {name:9s} ({x:.3f}, {y:.3f})")

# LAB: one 8-bit code per pixel and block size, precomputed for the image.
lab = compute_lab_map(face)
print(f"\nLAB maps: {len(lab.codes)} block sizes, "
      f"code rasters {[c.shape for c in lab.codes]}")
print(f"code histogram spread (4x4 blocks): "
      f"{len(np.unique(lab.codes[0]))} distinct codes")

# SURF: 32-dim gradient-statistics descriptor per pooled patch.
pool = default_surf_pool()
print(f"\nSURF pool: {len(pool)} patches "
      f"(squares and rectangles on a 16-px origin grid)")
ii = integral_image(face)
win = WindowRect(0, 0, 40, 40)
d = surf_descriptor(ii, win, pool[0])
print(f"patch 0 descriptor: dim {d.shape[0]}, L2 norm {np.linalg.norm(d):.3f}")

# SIFT: 128-dim orientation histogram at a landmark; 4 landmarks -> 512 dims.
s = sift_descriptor(face, shape.points[2])
print(f"\nSIFT at the nose: dim {s.shape[0]}, norm {np.linalg.norm(s):.3f}")
feats = shape_indexed_features(face, shape)
print(f"shape-indexed feature vector: dim {feats.shape[0]}")
