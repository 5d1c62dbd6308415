"""Reference evaluation of the fixture, written without sharing code with the
Rust implementation. Produces oracle_report.json.

    python3 oracle.py
"""
import json
from pathlib import Path

HERE = Path(__file__).parent
CLASSES = 4
IOU = 0.5


def corners(cx, cy, w, h):
    c = [cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2]
    return [min(max(v, 0.0), 1.0) for v in c]


def recenter(c):
    x1, y1, x2, y2 = c
    return corners((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)


def overlap(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area = lambda r: (r[2] - r[0]) * (r[3] - r[1])
    return inter / (area(a) + area(b) - inter)


gts = []
for p in sorted((HERE / "gt").glob("*.txt")):
    for line in p.read_text().splitlines():
        if line.strip():
            c, *v = line.split()
            gts.append({"image": p.stem, "class": int(c), "box": recenter(corners(*map(float, v)))})

dets = []
for line in (HERE / "det.jsonl").read_text().splitlines():
    if line.strip():
        d = json.loads(line)
        dets.append({"image": d["image"], "class": d["class"], "box": recenter(corners(*d["bbox"])), "score": d["score"]})

classes = []
aps = []
for q in range(CLASSES):
    g = [x for x in gts if x["class"] == q]
    d = sorted([x for x in dets if x["class"] == q], key=lambda x: -x["score"])  # stable
    used = [False] * len(g)
    flags = []
    for det in d:
        best, best_j = -1.0, None
        for j, gt in enumerate(g):
            if used[j] or gt["image"] != det["image"]:
                continue
            o = overlap(det["box"], gt["box"])
            if o > best:
                best, best_j = o, j
        hit = best_j is not None and best >= IOU
        if hit:
            used[best_j] = True
        flags.append(hit)
    tp = sum(flags)
    fp = len(flags) - tp
    fn = len(g) - tp
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / len(g) if g else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    # VOC-style sentinel envelope
    ctp = cfp = 0
    rs, ps = [], []
    for hit in flags:
        ctp += hit
        cfp += not hit
        rs.append(ctp / len(g))
        ps.append(ctp / (ctp + cfp))
    mrec = [0.0] + rs + [1.0]
    mpre = [0.0] + ps + [0.0]
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    ap = sum((mrec[i + 1] - mrec[i]) * mpre[i + 1] for i in range(len(mrec) - 1))
    aps.append(ap)
    classes.append({"class": q, "gt_count": len(g), "det_count": len(d), "tp": tp, "fp": fp, "fn": fn,
                    "precision": prec, "recall": rec, "f1": f1, "ap": ap})

golden = {
    "iou_threshold": IOU,
    "num_classes": CLASSES,
    "classes": classes,
    "map": sum(aps) / len(aps),
}
(HERE / "oracle_report.json").write_text(json.dumps(golden, indent=2) + "\n")
print(json.dumps(golden, indent=2))
