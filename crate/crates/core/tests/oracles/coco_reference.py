"""Reference AP values for a fixture directory, written independently of the
Rust evaluator. Prints JSON.

    python3 coco_reference.py ../../fixtures/eval20 > ../data/eval20_reference.json
"""

import json
import struct
import sys
from pathlib import Path

import numpy as np


def load_remb(path):
    raw = Path(path).read_bytes()
    assert raw[:4] == b"REMB"
    rows, dim = struct.unpack("<II", raw[8:16])
    data = np.frombuffer(raw[16:], dtype="<f4").astype(np.float64).reshape(rows, dim)
    keys = Path(str(path) + ".idx").read_text().splitlines()
    return data, keys


def iou(a, b):
    ax2, ay2 = a[0] + a[2], a[1] + a[3]
    bx2, by2 = b[0] + b[2], b[1] + b[3]
    iw = min(ax2, bx2) - max(a[0], b[0])
    ih = min(ay2, by2) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def class_ap(dets, gts, thr):
    """dets: list of (score, det_id, image, box); gts: image -> list of boxes."""
    n_gt = sum(len(v) for v in gts.values())
    flags = []
    for image in sorted(set(d[2] for d in dets)):
        mine = sorted([d for d in dets if d[2] == image], key=lambda d: (-d[0], d[1]))
        boxes = gts.get(image, [])
        used = [False] * len(boxes)
        for d in mine:
            best, best_iou = -1, -1.0
            for gi, g in enumerate(boxes):
                v = iou(d[3], g)
                if not used[gi] and v >= thr and v > best_iou:
                    best, best_iou = gi, v
            if best >= 0:
                used[best] = True
            flags.append(((-d[0], d[1]), best >= 0))
    flags.sort(key=lambda f: f[0])
    tp = np.array([f[1] for f in flags], dtype=np.float64)
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    rec = ctp / n_gt
    prec = ctp / (ctp + cfp)
    prec = np.maximum.accumulate(prec[::-1])[::-1]
    levels = np.arange(101) / 100.0
    idx = np.searchsorted(rec, levels, side="left")
    q = np.where(idx < len(prec), prec[np.minimum(idx, len(prec) - 1)], 0.0)
    return float(q.mean())


def evaluate(gt, results):
    thresholds = [0.5 + 0.05 * i for i in range(10)]
    out = {}
    for cat in gt["categories"]:
        c = cat["id"]
        gts = {}
        for a in gt["annotations"]:
            if a["category_id"] == c and not a.get("iscrowd", 0):
                gts.setdefault(str(a["image_id"]), []).append(a["bbox"])
        if not gts:
            continue
        dets = [(r["score"], r["det_id"], str(r["image_id"]), r["bbox"]) for r in results if r["category_id"] == c]
        aps = [class_ap(dets, gts, t) for t in thresholds]
        out[str(c)] = {"ap": float(np.mean(aps)), "ap50": aps[0], "ap75": aps[5]}
    return out


def summary(per_class, ids):
    rows = [per_class[str(i)] for i in ids if str(i) in per_class]
    return {k: float(np.mean([r[k] for r in rows])) for k in ("ap", "ap50", "ap75")}


def rescore(results, det_embs, text_embs, names, c, tau=0.01):
    det, det_keys = det_embs
    text, text_keys = text_embs
    det = det / np.linalg.norm(det, axis=1, keepdims=True)
    text = text / np.linalg.norm(text, axis=1, keepdims=True)
    text = text[[text_keys.index(n) for n in names]]
    row_of = {k: i for i, k in enumerate(det_keys)}
    out = []
    for r in results:
        r = dict(r)
        if r["det_id"] in row_of:
            logits = det[row_of[r["det_id"]]] @ text.T / tau
            sm = np.exp(logits - logits.max())
            sm /= sm.sum()
            vec = np.array(r["score_vector"])
            fused = c * vec + (1 - c) * sm
            r["score"] = float(fused[r["category_id"] - 1])
        out.append(r)
    return out


def main(root):
    root = Path(root)
    gt = json.loads((root / "annotations.json").read_text())
    results = json.loads((root / "results.json").read_text())
    base = [c["id"] for c in gt["categories"] if c.get("split") == "base"]
    novel = [c["id"] for c in gt["categories"] if c.get("split") == "novel"]
    names = [c["name"] for c in gt["categories"]]
    report = {}
    fused = rescore(results, load_remb(root / "detections.remb"), load_remb(root / "classes.remb"), names, 0.7)
    for label, res in (("raw", results), ("fused_0.7", fused)):
        per_class = evaluate(gt, res)
        report[label] = {
            "classes": per_class,
            "overall": summary(per_class, [c["id"] for c in gt["categories"]]),
            "base": summary(per_class, base),
            "novel": summary(per_class, novel),
        }
    json.dump(report, sys.stdout, indent=1)
    print()


if __name__ == "__main__":
    main(sys.argv[1])
