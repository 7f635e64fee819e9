"""Evaluate a trained model: ROC/PR curves, stage-1 recall-at-rejection,
shape-error statistics, and the per-stage timing benchmark.

Expects demo_model.json from demos/02_train_and_detect.py.
"""

import numpy as np

from funnelcascade.evaluation import (
    EvalRecord,
    bench_detect,
    pr_points,
    recall_at_rejection,
    roc_points,
    write_curve,
)
from funnelcascade.funnel import DetectParams, detect, load_model
from funnelcascade.synthetic import face_scene, negative_set, negative_texture

model = load_model("demo_model.json")

rng = np.random.default_rng(100)
records = []
for i in range(10):
    scene, rect, _shape, _yaw = face_scene(rng, 140, 140, face_size=70)
    dets, _ = detect(model, scene, DetectParams(min_face=60))
    records.append(EvalRecord(f"scene{i}", [rect], dets))

roc = roc_points(records)
pr = pr_points(records)
write_curve("demo_roc.txt", roc)
write_curve("demo_pr.txt", pr)
print("ROC summary:", roc.summary)
print("PR summary:", pr.summary)

negs = negative_set(8, 100, 100, seed=200)
rep = recall_at_rejection(model, [(n, []) for n in negs], stage=1,
                          params=DetectParams(min_face=40))
print(f"stage-1 on negatives: removal {rep.removal:.4f}, "
      f"{rep.windows_per_image:.1f} surviving windows/image")

bench_img = negative_texture(np.random.default_rng(300), 640, 480)
bench = bench_detect(model, [bench_img], DetectParams(min_face=80),
                     repetitions=3)
print("\n640x480 min-face-80 benchmark:")
print(bench.format())
