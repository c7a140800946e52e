import time
import numpy as np
from sparsedet import synth, detector, training, evaluation
from sparsedet.config import RunConfig

cfg = RunConfig()
train_scenes = [synth.generate(synth.SceneSpec(), seed=1000 + i) for i in range(200)]
val_scenes = [synth.generate(synth.SceneSpec(), seed=888000 + i) for i in range(40)]

cfg.train.steps = 2000
t0 = time.perf_counter()
store = training.train(train_scenes, cfg)
t_train = time.perf_counter() - t0
dets = [detector.detect(store, cfg.model, s.pc) for s in val_scenes]
report = evaluation.evaluate(dets, [(s.gt_boxes, s.gt_classes) for s in val_scenes], iou_threshold=0.5)
print(f"steps=2000 train={t_train:.0f}s mAP={report.mean_ap:.3f}", flush=True)
print("per-class:", {k: (None if v is None else round(v,3)) for k,v in report.per_class_ap.items()}, flush=True)
print("bins:", {k: (None if v is None else round(v,3)) for k,v in report.length_bin_ap.items()}, flush=True)
import pickle
with open(".trial3_store.pkl", "wb") as f:
    pickle.dump({k: store[k] for k in store.names()}, f)
