"""Train a small funnel on synthetic faces, then detect in a scene.

Takes about a minute: 150 rendered faces across the five yaw views, texture
negatives, then the three-stage cascade end to end.
"""

import numpy as np

from funnelcascade.funnel import DetectParams, detect, format_detection, save_model
from funnelcascade.synthetic import face_scene, face_set, negative_set
from funnelcascade.training import FunnelTrainConfig, TrainSample, train_funnel

rasters, shapes, yaws = face_set(150, seed=0)
positives = [TrainSample(r, True, y, s) for r, s, y in zip(rasters, shapes, yaws)]
negatives = negative_set(15, 100, 100, seed=1)
print(f"training on {len(positives)} faces, {len(negatives)} negative images")

model, report = train_funnel(positives, negatives,
                             FunnelTrainConfig(augment_factor=2))
print(report.format())

save_model(model, "demo_model.json")
print("model saved to demo_model.json")

rng = np.random.default_rng(7)
scene, rect, _shape, yaw = face_scene(rng, 160, 160, face_size=80)
print(f"\nscene 160x160 with one face at {rect}, yaw {yaw:.1f} deg")
dets, stats = detect(model, scene, DetectParams(min_face=80))
print(f"windows {stats.windows_total} -> stage1 {stats.after_stage1} "
      f"-> stage2 {stats.after_stage2} -> stage3 {stats.after_stage3} "
      f"-> {len(dets)} after NMS")
for d in dets:
    print(format_detection(d))
