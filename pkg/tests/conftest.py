"""Shared fixtures: the desk-scale dataset, trained victim, and weight bank.

Heavy artifacts (discriminators, learned weights, attack batches) are built
once per session and reused across module and acceptance tests.
"""

import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from specwalk.attack import AttackConfig, run_attack
from specwalk.datagen import SyntheticDatasetSpec, generate_dataset
from specwalk.fusion import (
    DiscTrainConfig,
    FusionWeights,
    WeightBank,
    WeightTrainConfig,
    fuse_spectra,
    learn_fusion_weights,
    train_discriminator,
)
from specwalk.oracle import train_native_classifier

DESK_SEED = 7


@pytest.fixture(scope="session")
def dataset():
    spec = SyntheticDatasetSpec(seed=DESK_SEED)
    return generate_dataset(spec)


@pytest.fixture(scope="session")
def train_clouds(dataset):
    return dataset[0]


@pytest.fixture(scope="session")
def test_clouds(dataset):
    return dataset[1]


@pytest.fixture(scope="session")
def by_class(train_clouds):
    out = {}
    for c in train_clouds:
        out.setdefault(c.label, []).append(c)
    return out


@pytest.fixture(scope="session")
def victim(train_clouds):
    return train_native_classifier(train_clouds)


@pytest.fixture(scope="session")
def desk_config():
    # epsilon relaxed from the 0.2 default: cross-class gaps between the
    # synthetic shapes are larger than between same-scale scanned objects
    return AttackConfig(epsilon=0.7, rounds=15, seed=42)


def random_fused_negatives(sources, others, rng, k=10):
    negatives = []
    for src in sources:
        tgt = others[int(rng.integers(len(others)))]
        w = FusionWeights(float(rng.uniform()), float(rng.uniform()))
        negatives.append(fuse_spectra(src, tgt, w, k=k))
    return negatives


@pytest.fixture(scope="session")
def quick_bank(train_clouds, by_class):
    """Bank with one learned entry per class, trained at reduced budgets."""
    bank = WeightBank(provenance={"epochs": 12, "learning_rate": 0.001, "seed": DESK_SEED})
    rng = np.random.default_rng(DESK_SEED)
    for cid in sorted(by_class):
        positives = by_class[cid]
        others = [c for c in train_clouds if c.label != cid]
        negatives = random_fused_negatives(positives, others, rng)
        disc = train_discriminator(
            positives, negatives, DiscTrainConfig(epochs=40, seed=cid)
        )
        weights = learn_fusion_weights(
            cid, positives, others[:8], disc,
            WeightTrainConfig(epochs=12, seed=cid),
        )
        bank.add(weights)
    return bank


@pytest.fixture(scope="session")
def class0_fusion(train_clouds, by_class):
    """Full-budget discriminator and learned weights for class 0 together
    with held-out clouds for the accuracy check."""
    rng = np.random.default_rng(101)
    positives = by_class[0]
    others = [c for c in train_clouds if c.label != 0]
    negatives = random_fused_negatives(positives, others, rng)
    disc = train_discriminator(
        positives[:16], negatives[:16], DiscTrainConfig(epochs=100, seed=0)
    )
    weights = learn_fusion_weights(
        0, positives[:16], others[:10], disc, WeightTrainConfig(epochs=50, seed=0)
    )
    heldout = (positives[16:], negatives[16:])
    return disc, weights, heldout, positives, others


@pytest.fixture(scope="session")
def attack_batch(test_clouds, train_clouds, victim, quick_bank, desk_config):
    """Attack every correctly classified test instance once; reused by the
    acceptance checks for safety, monotonicity, ASR, and query budgets."""
    results = []
    for idx, src in enumerate(test_clouds):
        if victim.predict(src) != src.label:
            continue
        targets = [c for c in train_clouds if c.label != src.label]
        cfg = AttackConfig(**{**desk_config.__dict__, "seed": 1000 + idx})
        results.append((src, run_attack(src, targets, victim, quick_bank, cfg)))
    return results


# --- tiny HTTP servers for wire-protocol tests ---------------------------------


class _Handler(BaseHTTPRequestHandler):
    def log_message(self, *args):
        pass

    def do_GET(self):
        behavior = self.server.behavior
        if self.path == "/health":
            body = behavior.get("health", b'{"classes": 1}')
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.end_headers()
            self.wfile.write(body)
        else:
            self.send_response(404)
            self.end_headers()

    def do_POST(self):
        behavior = self.server.behavior
        length = int(self.headers.get("Content-Length", 0))
        raw = self.rfile.read(length)
        behavior.setdefault("requests", []).append(raw)
        fail_times = behavior.get("fail_times", 0)
        if fail_times > 0:
            behavior["fail_times"] = fail_times - 1
            self.send_response(500)
            self.end_headers()
            self.wfile.write(b"victim exploded")
            return
        handler = behavior.get("predict")
        if handler is not None:
            status, body = handler(raw)
        else:
            status, body = 200, behavior.get("body", b'{"label": 0}')
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(body)


class WireServer:
    """In-process single-threaded HTTP server speaking the oracle protocol."""

    def __init__(self, behavior=None):
        self.server = HTTPServer(("127.0.0.1", 0), _Handler)
        self.server.behavior = behavior if behavior is not None else {}
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    @property
    def endpoint(self):
        return f"http://127.0.0.1:{self.server.server_port}"

    @property
    def behavior(self):
        return self.server.behavior

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def wire_server():
    servers = []

    def make(behavior=None):
        s = WireServer(behavior)
        servers.append(s)
        return s

    yield make
    for s in servers:
        s.close()
