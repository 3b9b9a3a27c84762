#!/usr/bin/env python3
"""Convert 3DSSG annotations into per-scan scene-graph JSON files.

Inputs are the release files `objects.json` and `relationships.json`, plus
an optional directory of 3RScan `semseg.v2.json` files laid out as
`<dir>/<scan>/semseg.v2.json` for bounding boxes. Oriented boxes are
converted to their axis-aligned hulls. Objects without geometry are written
without a `bbox`; `sgr ingest` drops their edges.

    python3 scripts/convert_3dssg.py objects.json relationships.json \
        --semseg-dir 3RScan/ --out data/3dssg/scenes
"""
import argparse
import json
import sys
from pathlib import Path


def aabb_from_obb(obb):
    c = obb["centroid"]
    lengths = obb["axesLengths"]
    axes = [obb["normalizedAxes"][3 * k:3 * k + 3] for k in range(3)]
    half = [sum(abs(axes[k][i]) * lengths[k] / 2.0 for k in range(3)) for i in range(3)]
    return {"min": [c[i] - half[i] for i in range(3)], "max": [c[i] + half[i] for i in range(3)]}


def load_boxes(semseg_dir, scan):
    if semseg_dir is None:
        return {}
    path = Path(semseg_dir) / scan / "semseg.v2.json"
    if not path.exists():
        return {}
    doc = json.loads(path.read_text())
    return {int(g["objectId"]): aabb_from_obb(g["obb"]) for g in doc.get("segGroups", []) if "obb" in g}


def flatten_attributes(attrs):
    if isinstance(attrs, list):
        return [a for a in attrs if a]
    out = []
    for key in sorted(attrs or {}):
        for v in attrs[key]:
            if v and v not in out:
                out.append(v)
    return out


def convert(objects_doc, relationships_doc, semseg_dir):
    rels_by_scan = {s["scan"]: s.get("relationships", []) for s in relationships_doc["scans"]}
    for scan in objects_doc["scans"]:
        scan_id = scan["scan"]
        boxes = load_boxes(semseg_dir, scan_id)
        objects = []
        ids = set()
        for o in scan["objects"]:
            oid = int(o["id"])
            ids.add(oid)
            entry = {"id": oid, "label": o["label"], "attributes": flatten_attributes(o.get("attributes"))}
            if oid in boxes:
                entry["bbox"] = boxes[oid]
            objects.append(entry)
        relations = []
        for r in rels_by_scan.get(scan_id, []):
            src, dst, name = int(r[0]), int(r[1]), r[3]
            if src in ids and dst in ids and src != dst:
                relations.append([src, name, dst])
        yield scan_id, {"id": scan_id, "objects": objects, "relations": relations}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("objects")
    ap.add_argument("relationships")
    ap.add_argument("--semseg-dir")
    ap.add_argument("--out", required=True)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    objects_doc = json.loads(Path(args.objects).read_text())
    relationships_doc = json.loads(Path(args.relationships).read_text())
    n = 0
    for scan_id, doc in convert(objects_doc, relationships_doc, args.semseg_dir):
        (out / f"{scan_id}.json").write_text(json.dumps(doc, indent=2))
        n += 1
    print(f"wrote {n} scene graphs to {out}", file=sys.stderr)


if __name__ == "__main__":
    main()
