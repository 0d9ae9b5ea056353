"""Regenerates the synthetic panoramas and the JSON fixtures derived from them.

Run from the repository root: python3 fixtures/make_fixtures.py
Requires Pillow. Output is deterministic.
"""

import json
import math
import random
from pathlib import Path

from PIL import Image, ImageDraw

ROOT = Path(__file__).resolve().parent
W, H = 512, 256
VIEW = 128
FOV = 90.0
YAWS = {"v0": 0.0, "v1": 90.0, "v2": 180.0, "v3": 270.0}

COLOURS = {
    "Bollard": (60, 60, 64),
    "Traffic Cone": (240, 120, 20),
    "Fire Hydrant": (200, 20, 30),
    "Street Light": (190, 190, 200),
    "Traffic Sign": (30, 70, 200),
    "Trash Bin": (30, 140, 60),
    "Manhole Cover": (40, 35, 30),
    "Surveillance Camera": (235, 235, 235),
    "Traffic Light": (15, 15, 15),
    "Ball Bollard": (160, 160, 150),
}

# (view, detector label, canonical category, confidence, view box, attributes or None)
SCENES = {
    "pano_001": [
        ("v0", "bollard", "Bollard", 0.91, [40, 70, 52, 100],
         {"Material": "metal", "Color": "grey", "Posture": "upright", "Damage Condition": "intact", "Reflective Property": "reflective"}),
        ("v0", "traffic cone", "Traffic Cone", 0.82, [80, 85, 94, 105],
         {"Color": "orange", "Posture": "upright", "Damage Condition": "intact", "Reflective Property": "reflective"}),
        ("v0", "bench", None, 0.77, [10, 80, 30, 95], None),
        ("v0", "bollard", None, 0.25, [100, 90, 108, 104], None),
        ("v1", "fire hydrant", "Fire Hydrant", 0.88, [55, 75, 70, 100],
         {"Color": "red", "Working State": "in service", "Damage Condition": "faded"}),
        ("v1", "fire hydrant", None, 0.80, [56, 76, 71, 101], None),
        ("v2", "street lamp", "Street Light", 0.86, [58, 20, 70, 100],
         {"Number of Arms": "one", "Working State": "off", "Damage Condition": "intact", "Solar-Powered": "no"}),
    ],
    "pano_002": [
        ("v0", "traffic sign", "Traffic Sign", 0.90, [30, 30, 50, 50],
         {"Type": "mandatory", "Shape": "circular", "Color": "blue", "Damage Condition": "intact"}),
        ("v0", "trash bin", "Trash Bin", 0.70, [70, 80, 90, 105],
         {"Category": "recyclable", "Material": "plastic", "Color": "green", "Shape": "rectangular", "Fullness": "partially full",
          "Damage Condition": "intact", "Lid Condition": "closed", "Nearby Garbage Piles": "no", "Fixed Type": "fixed"}),
        ("v1", "manhole cover", "Manhole Cover", 0.66, [40, 110, 80, 122],
         {"Shape": "circular", "Safety Condition": "intact", "Surface Pattern": "grid"}),
        ("v3", "surveillance camera", "Surveillance Camera", 0.74, [90, 10, 104, 22],
         {"Occlusion Condition": "unoccluded", "Damage Condition": "intact", "Shape": "bullet", "Application Scenario": "traffic monitoring"}),
        ("v3", "bollard", "Bollard", 0.31, [20, 90, 30, 110],
         {"Material": "stone", "Color": "grey", "Posture": "tilted", "Damage Condition": "damaged", "Reflective Property": "non-reflective"}),
    ],
    "pano_003": [
        ("v0", "traffic light", "Traffic Light", 0.93, [60, 15, 70, 40],
         {"Type": "vehicle", "Working State": "working", "Color": "red", "Damage Condition": "intact", "Device Type": "with countdown"}),
        ("v0", "ball bollard", "Ball Bollard", 0.58, [30, 100, 42, 112],
         {"Category": "stone", "Posture": "upright", "Damage Condition": "intact", "Reflective Property": "non-reflective"}),
        ("v2", "traffic cone", "Traffic Cone", 0.90, [10, 90, 22, 110],
         {"Color": "orange", "Posture": "fallen", "Damage Condition": "damaged", "Reflective Property": "reflective"}),
        ("v3", "trash bin", "Trash Bin", 0.81, [50, 80, 72, 108],
         {"Category": "other waste", "Material": "metal", "Color": "grey", "Shape": "cylindrical", "Fullness": "full",
          "Damage Condition": "intact", "Lid Condition": "no lid", "Nearby Garbage Piles": "yes", "Fixed Type": "fixed"}),
    ],
}


def view_to_pano(yaw_deg, u, v):
    f = VIEW / 2 / math.tan(math.radians(FOV / 2))
    x = (u - VIEW / 2) / f
    y = -(v - VIEW / 2) / f
    z = 1.0
    yaw = math.radians(yaw_deg)
    wx = x * math.cos(yaw) + z * math.sin(yaw)
    wz = -x * math.sin(yaw) + z * math.cos(yaw)
    lon = math.atan2(wx, wz)
    lat = math.atan2(y, math.hypot(wx, wz))
    return W / 2 + lon / (2 * math.pi) * W, H / 2 - lat / math.pi * H


def pano_box(view, box):
    """Panorama box of a view box as [x, y, w, h], unwrapped past the right edge."""
    x0, y0, x1, y1 = box
    pts = []
    for i in range(9):
        t = i / 8
        for (u, v) in [(x0 + t * (x1 - x0), y0), (x0 + t * (x1 - x0), y1), (x0, y0 + t * (y1 - y0)), (x1, y0 + t * (y1 - y0))]:
            pts.append(view_to_pano(YAWS[view], u, v))
    ref = pts[0][0]
    xs = [px if abs(px - ref) < W / 2 else (px + W if px < ref else px - W) for px, _ in pts]
    ys = [py for _, py in pts]
    xmin, xmax = min(xs), max(xs)
    if xmin < 0:
        xmin, xmax = xmin + W, xmax + W
    return [round(xmin, 2), round(min(ys), 2), round(xmax - xmin, 2), round(max(ys) - min(ys), 2)]


def draw_scene(name, objects):
    rnd = random.Random(name)
    img = Image.new("RGB", (W, H))
    px = img.load()
    for y in range(H):
        for x in range(W):
            if y < H // 2:
                px[x, y] = (110 + y // 3, 150 + y // 4, 220)
            else:
                n = rnd.randint(-6, 6)
                px[x, y] = (95 + n, 95 + n, 100 + n)
    d = ImageDraw.Draw(img)
    d.rectangle([0, H // 2 + 30, W, H // 2 + 34], fill=(230, 230, 230))
    # Unmapped and duplicate detections first so real objects stay on top.
    for view, _, cat, _, box, _ in sorted(objects, key=lambda o: o[2] is not None):
        if cat is None:
            colour = (120, 90, 60)
        else:
            colour = COLOURS[cat]
        x, y, w, h = pano_box(view, box)
        for shift in (0, -W):
            d.rectangle([x + shift, y, x + shift + w, y + h], fill=colour, outline=(20, 20, 20))
    return img


def main():
    (ROOT / "panos").mkdir(exist_ok=True)
    detections = {}
    gt = {"images": [], "annotations": [], "categories": []}
    cats = list(COLOURS)
    gt["categories"] = [{"id": i + 1, "name": c} for i, c in enumerate(cats)]
    ann_id = 1
    preds = []
    attr_preds = []
    rnd = random.Random(7)
    for img_id, (name, objects) in enumerate(SCENES.items(), start=1):
        draw_scene(name, objects).save(ROOT / "panos" / f"{name}.png", optimize=False)
        gt["images"].append({"id": img_id, "file_name": f"{name}.png", "width": W, "height": H})
        for view in YAWS:
            hits = [{"label": lab, "confidence": conf, "bbox": box} for v, lab, _, conf, box, _ in objects if v == view]
            if hits:
                detections[f"{name}/{view}"] = hits
        for k, (view, _, cat, conf, box, attrs) in enumerate(objects):
            if cat is None:
                continue
            bbox = pano_box(view, box)
            gt["annotations"].append({
                "id": ann_id, "image_id": img_id, "category_id": cats.index(cat) + 1, "bbox": bbox,
                "area": round(bbox[2] * bbox[3], 2), "iscrowd": 0, "attributes": attrs,
            })
            # Predictions: jittered boxes, one miss, one wrong attribute per object.
            if ann_id != 6:
                jit = [round(b + rnd.uniform(-1.0, 1.0), 2) for b in bbox[:2]] + bbox[2:]
                x_min = jit[0]
                x_max = jit[0] + jit[2]
                if x_max > W:
                    x_max -= W
                preds.append({
                    "object_id": f"{name}-{k:03d}", "category": cat,
                    "bbox": {"x_min": x_min, "y_min": jit[1], "x_max": x_max, "y_max": jit[1] + jit[3]},
                    "attributes": [], "source_image": name, "detection_confidence": conf, "status": "ok",
                })
            names = list(attrs)
            pred_attrs = []
            for j, a in enumerate(names):
                value = attrs[a]
                if j == ann_id % len(names) and ann_id % 3 == 0:
                    value = "unknown"
                pred_attrs.append({"name": a, "value": value, "confidence": 0.9})
            x, y, w, h = bbox
            attr_preds.append({
                "object_id": f"ann-{ann_id}", "category": cat,
                "bbox": {"x_min": x, "y_min": y, "x_max": x + w, "y_max": y + h},
                "attributes": pred_attrs, "source_image": name, "status": "ok",
            })
            ann_id += 1
    preds.append({
        "object_id": "pano_003-099", "category": "Bollard",
        "bbox": {"x_min": 10.0, "y_min": 140.0, "x_max": 16.0, "y_max": 160.0},
        "attributes": [], "source_image": "pano_003", "detection_confidence": 0.4, "status": "ok",
    })

    (ROOT / "detections.json").write_text(json.dumps(detections, indent=2) + "\n")
    (ROOT / "eval").mkdir(exist_ok=True)
    (ROOT / "eval" / "gt.json").write_text(json.dumps(gt, indent=2) + "\n")
    (ROOT / "eval" / "pred.records.jsonl").write_text("".join(json.dumps(p) + "\n" for p in preds))
    (ROOT / "eval" / "attributes.records.jsonl").write_text("".join(json.dumps(p) + "\n" for p in attr_preds))

    exemplars = dict(gt)
    exemplars["annotations"] = gt["annotations"][:12]
    (ROOT / "exemplars").mkdir(exist_ok=True)
    (ROOT / "exemplars" / "annotations.json").write_text(json.dumps(exemplars, indent=2) + "\n")


if __name__ == "__main__":
    main()
