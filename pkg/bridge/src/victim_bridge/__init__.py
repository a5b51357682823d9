"""Thin HTTP bridge exposing point-cloud classifiers as hard-label oracles."""

from .adapters import CentroidAdapter, ConstantAdapter, VictimAdapter, make_adapter
from .server import BridgeServer, serve

__version__ = "0.1.0"
