"""Victim adapters and their registry.

An adapter wraps one classifier behind two methods: ``load(model_spec)`` to
set it up and ``classify(points) -> int`` for deterministic inference. New
victims register through the ``victim_bridge.adapters`` entry-point group, so
serving a model needs nothing beyond a classify function.
"""

from __future__ import annotations

from importlib import metadata
from typing import Dict, Type

import numpy as np

from .centroid import load_centroid_model


class VictimAdapter:
    """Deterministic hard-label classifier contract."""

    num_classes: int = 0

    def load(self, model_spec: str) -> None:
        raise NotImplementedError

    def classify(self, points: np.ndarray) -> int:
        raise NotImplementedError


class ConstantAdapter(VictimAdapter):
    """Always answers the same label; protocol conformance reference."""

    def load(self, model_spec: str) -> None:
        self.label = int(model_spec) if model_spec else 0
        self.num_classes = max(1, self.label + 1)

    def classify(self, points: np.ndarray) -> int:
        return self.label


class CentroidAdapter(VictimAdapter):
    """The engine's desk-scale nearest-centroid victim, reimplemented here.

    ``model_spec`` is a dataset directory (trained on load) or a centroid
    JSON file.
    """

    def load(self, model_spec: str) -> None:
        self.model = load_centroid_model(model_spec)
        self.num_classes = self.model.num_classes

    def classify(self, points: np.ndarray) -> int:
        return self.model.classify(points)


_BUILTINS: Dict[str, Type[VictimAdapter]] = {
    "constant": ConstantAdapter,
    "centroid": CentroidAdapter,
}


def available_adapters() -> Dict[str, Type[VictimAdapter]]:
    adapters = dict(_BUILTINS)
    try:
        entries = metadata.entry_points(group="victim_bridge.adapters")
    except TypeError:  # pragma: no cover - pre-3.10 metadata API
        entries = metadata.entry_points().get("victim_bridge.adapters", [])
    for entry in entries:
        try:
            adapters[entry.name] = entry.load()
        except Exception:  # a broken third-party entry must not kill serving
            continue
    return adapters


def make_adapter(spec: str) -> VictimAdapter:
    """Build and load an adapter from '<name>:<model spec>' notation."""
    name, _, model_spec = spec.partition(":")
    adapters = available_adapters()
    if name not in adapters:
        raise KeyError(f"unknown adapter {name!r}; available: {sorted(adapters)}")
    adapter = adapters[name]()
    adapter.load(model_spec)
    return adapter
