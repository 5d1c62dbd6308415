"""Regenerates the synthetic 12-image, 4-class evaluation set.

    python3 generate.py        # writes gt/*.txt and det.jsonl next to this file
"""
import json
import random
from pathlib import Path

HERE = Path(__file__).parent
rng = random.Random(20240917)


def r4(v):
    return round(v, 4)


def jitter(box, amount):
    cx, cy, w, h = box
    return (
        r4(cx + rng.uniform(-amount, amount) * w),
        r4(cy + rng.uniform(-amount, amount) * h),
        r4(w * rng.uniform(1 - amount, 1 + amount)),
        r4(h * rng.uniform(1 - amount, 1 + amount)),
    )


gt_dir = HERE / "gt"
gt_dir.mkdir(exist_ok=True)
dets = []
for i in range(12):
    image = f"img{i:02d}"
    objects = []
    for _ in range(rng.randint(2, 5)):
        cls = rng.randrange(4)
        w, h = rng.uniform(0.08, 0.3), rng.uniform(0.08, 0.3)
        cx, cy = rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)
        objects.append((cls, (r4(cx), r4(cy), r4(w), r4(h))))
    if i == 3:
        # touches the border; clipped on load
        objects.append((1, (0.02, 0.5, 0.12, 0.2)))
    with open(gt_dir / f"{image}.txt", "w") as f:
        for cls, b in objects:
            f.write(f"{cls} {b[0]} {b[1]} {b[2]} {b[3]}\n")
    for cls, b in objects:
        u = rng.random()
        if u < 0.15:
            continue  # missed
        if u < 0.25:
            dets.append((image, cls, jitter(b, 0.6), rng.uniform(0.05, 0.6)))  # poor localization
        else:
            dets.append((image, cls, jitter(b, 0.08), rng.uniform(0.3, 0.99)))
        if rng.random() < 0.15:
            dets.append((image, cls, jitter(b, 0.1), rng.uniform(0.1, 0.7)))  # duplicate
        if rng.random() < 0.1:
            dets.append((image, (cls + 1) % 4, jitter(b, 0.05), rng.uniform(0.2, 0.8)))  # wrong class
    for _ in range(rng.randint(0, 2)):
        dets.append((image, rng.randrange(4),
                     (r4(rng.uniform(0.1, 0.9)), r4(rng.uniform(0.1, 0.9)), 0.1, 0.1),
                     rng.uniform(0.05, 0.5)))

# one exact score tie between two detections of the same class
dets[5] = (dets[5][0], dets[5][1], dets[5][2], 0.5)
dets[9] = (dets[9][0], dets[5][1], dets[9][2], 0.5)

with open(HERE / "det.jsonl", "w") as f:
    for image, cls, b, s in dets:
        f.write(json.dumps({"image": image, "class": cls, "bbox": list(b), "score": round(s, 4)}) + "\n")
