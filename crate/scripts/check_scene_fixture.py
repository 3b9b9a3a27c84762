#!/usr/bin/env python3
"""Independent expectations for a scene-graph fixture: node count, labels
after normalization, deduplicated triples and edges kept at a threshold."""
import itertools
import json
import math
import sys


def norm(s):
    return " ".join(s.lower().split())


def box_distance(a, b):
    # closest points by clamping, then Euclidean distance
    p = [min(max(b["min"][i], a["min"][i]), a["max"][i]) for i in range(3)]
    q = [min(max(p[i], b["min"][i]), b["max"][i]) for i in range(3)]
    return math.dist(p, q)


def main(path, tau):
    doc = json.load(open(path))
    boxes = {o["id"]: o.get("bbox") for o in doc["objects"]}
    triples = []
    for s, r, t in doc["relations"]:
        key = (s, norm(r), t)
        if key not in triples:
            triples.append(key)
    kept = [k for k in triples if boxes[k[0]] and boxes[k[2]] and box_distance(boxes[k[0]], boxes[k[2]]) <= tau]
    no_box = [k for k in triples if not (boxes[k[0]] and boxes[k[2]])]
    print(json.dumps({
        "nodes": len(doc["objects"]),
        "labels": sorted(norm(o["label"]) for o in doc["objects"]),
        "edges": len(triples),
        "edges_kept": len(kept),
        "dropped_without_bbox": len(no_box),
        "pairs_within_tau": sum(
            1 for a, b in itertools.combinations([o for o in doc["objects"] if o.get("bbox")], 2)
            if box_distance(a["bbox"], b["bbox"]) <= tau
        ),
    }, indent=1))


if __name__ == "__main__":
    main(sys.argv[1], float(sys.argv[2]) if len(sys.argv) > 2 else 1.5)
