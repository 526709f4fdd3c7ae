"""
Evaluation and training control
===============================

Point matching and pooled metrics, then the learning-rate schedule,
early stopping and the two loss functions.
"""

import numpy as np

from mitocascade.ensemble import DetectionBox, DetectionSet
from mitocascade.evaluate import match, report
from mitocascade.tiling import PointAnnotation
from mitocascade.trainctl import (CONTINUE, CyclicalLrConfig, EarlyStopState, bce, lr_at, observe,
                                  schedule_csv, smooth_l1)

# two detections compete for one mitosis; the higher score wins it
truth = [PointAnnotation("a", 100.0, 100.0)]
dets = DetectionSet("a", [
    DetectionBox(90, 90, 110, 110, 0.9),
    DetectionBox(95, 92, 115, 112, 0.8),
])
result = match(dets, truth)
print(f"tp={result.tp} fp={result.fp} fn={result.fn} pairs={result.pairs}")

# metrics are pooled over images, not averaged per image
r = report({"a": (8, 2, 1), "b": (1, 0, 3)})
print(f"precision={r.precision:.3f} recall={r.recall:.3f} f1={r.f1:.3f}")

# triangular cyclical learning rate
cfg = CyclicalLrConfig()
print([f"{lr_at(cfg, i):.2e}" for i in range(9)])
print(schedule_csv(cfg, 3), end="")

# early stopping on a validation curve that flattens out
losses = np.concatenate([np.linspace(1.0, 0.4, 8), np.full(20, 0.45)])
state = EarlyStopState(patience=10)
for epoch, loss in enumerate(losses):
    state, action = observe(state, epoch, float(loss))
    if action != CONTINUE:
        print(f"epoch {epoch:2d} loss {loss:.3f} -> {action}")
    if state.stopped:
        break
print("best epoch:", state.best_epoch)

print("smooth_l1:", [smooth_l1(x) for x in (0.0, 0.5, 1.0, 2.0)])
print("bce:", round(bce(0.5, 1), 4), round(bce(0.9, 0), 4))
