import numpy as np
from sparsedet import synth, detector, training, evaluation, geometry as geo
from sparsedet.config import RunConfig
from sparsedet.segment_ops import NONE_ID

cfg = RunConfig()
cfg.train.steps = 600
train_scenes = [synth.generate(synth.SceneSpec(), seed=1000 + i) for i in range(200)]
store = training.train(train_scenes, cfg)

for seed in (888000, 888001, 888002):
    scene = synth.generate(synth.SceneSpec(), seed=seed)
    state = detector.forward(store, cfg.model, scene.pc)
    s = state.structure
    print(f"\n=== scene {seed}: {scene.pc.n} pts, {scene.gt_boxes.shape[0]} gt "
          f"(classes {scene.gt_classes.tolist()}, lengths {scene.gt_boxes[:,3].round(1).tolist()})", flush=True)
    for k in range(scene.gt_boxes.shape[0]):
        inside = geo.points_in_box(scene.pc.coords, scene.gt_boxes[k])
        voted = state.votes.voted_centers.data[inside]
        xy_err = np.linalg.norm(voted[:, :2] - scene.gt_boxes[k,:2], axis=1)
        z_err = np.abs(voted[:, 2] - scene.gt_boxes[k,2])
        gids = np.unique(s.grouping.ids[inside]); gids = gids[gids != NONE_ID]
        best_iou, best_p = 0.0, -1
        for p in range(s.boxes.shape[0]):
            v = geo.iou_3d(s.boxes[p], scene.gt_boxes[k])
            if v > best_iou: best_iou, best_p = v, p
        ref = state.refined
        best_ref = max((geo.iou_3d(ref.boxes[p], scene.gt_boxes[k]) for p in range(ref.boxes.shape[0])), default=0)
        print(f" gt{k} cls{scene.gt_classes[k]} l={scene.gt_boxes[k,3]:.1f} pts={int(inside.sum()):4d} "
              f"vote: xy_med={np.median(xy_err):.2f} z_med={np.median(z_err):.2f} "
              f"groups={len(gids)} bestPropIoU={best_iou:.2f}(cls{s.classes[best_p] if best_p>=0 else -1}) bestRefIoU={best_ref:.2f}", flush=True)
    dets = detector.detect(store, cfg.model, scene.pc)
    print(f" groups={s.grouping.num_groups} proposals={s.boxes.shape[0]} dets={dets.boxes.shape[0]}")
    for i in range(min(10, dets.boxes.shape[0])):
        ious = [geo.iou_3d(dets.boxes[i], scene.gt_boxes[k]) for k in range(scene.gt_boxes.shape[0])]
        k = int(np.argmax(ious)) if ious else -1
        print(f"  det{i} cls{dets.classes[i]} score={dets.scores[i]:.2f} "
              f"gt={k} iou={max(ious) if ious else 0:.2f} gt_cls={scene.gt_classes[k] if k>=0 else -1}", flush=True)
