#!/usr/bin/env python3
"""Regenerate the bridge conformance fixtures.

Development-time helper: uses the attack engine to produce the reference
dataset, the 100-cloud loopback labels, and the golden protocol byte pairs.
Run from the bridge directory; outputs are committed under fixtures/.
"""

import json
import sys
from pathlib import Path

import numpy as np

from specwalk.cli import main as specwalk_main
from specwalk.cloud import PointCloud, fmt17
from specwalk.datagen import load_dataset
from specwalk.oracle import encode_predict_request, train_native_classifier

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"
DATASET = FIXTURES / "loopback_dataset"


def make_dataset():
    specwalk_main([
        "gen-data", "--out", str(DATASET),
        "--classes", "sphere,box,torus",
        "--instances", "8", "--points", "128", "--seed", "5",
    ])


def make_loopback_clouds():
    train, test, _ = load_dataset(DATASET)
    clf = train_native_classifier(train)
    rng = np.random.default_rng(2024)
    clouds = []
    # mix of dataset clouds, perturbed dataset clouds, and raw noise
    pool = (test * 3)[:40]
    for cloud in pool:
        clouds.append(cloud.points + rng.standard_normal(cloud.points.shape) * 0.05)
    for _ in range(100 - len(clouds)):
        clouds.append(rng.standard_normal((64, 3)))
    entries = []
    for pts in clouds:
        cloud = PointCloud(pts)
        entries.append({
            "points": [[fmt17(c) for c in p] for p in cloud.points],
            "expected_label": int(clf.predict(cloud)),
        })
    payload = {"model": "centroid:fixtures/loopback_dataset", "clouds": entries}
    (FIXTURES / "loopback_clouds.json").write_text(json.dumps(payload) + "\n")
    print(f"wrote {len(entries)} loopback clouds")


def make_golden_protocol():
    train, _, _ = load_dataset(DATASET)
    clf = train_native_classifier(train)
    cases = []
    for cloud in train[:3]:
        request = encode_predict_request(cloud)
        label = clf.predict(cloud)
        cases.append({
            "request": request.decode("ascii"),
            "status": 200,
            "response": json.dumps({"label": int(label)}),
        })
    # malformed bodies must yield 400 without a label field
    for bad in (b"not json at all", b'{"points": [[1, 2]]}', b'{"cloud": []}'):
        cases.append({"request": bad.decode("ascii"), "status": 400, "response": None})
    (FIXTURES / "golden_protocol.json").write_text(json.dumps({"cases": cases}, indent=1) + "\n")
    print(f"wrote {len(cases)} golden protocol cases")


if __name__ == "__main__":
    FIXTURES.mkdir(exist_ok=True)
    make_dataset()
    make_loopback_clouds()
    make_golden_protocol()
    sys.exit(0)
