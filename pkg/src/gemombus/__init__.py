"""Adaptive, secure publish/subscribe middleware."""

from .asm import AdaptationAction, AdaptationManager, AsmParams, SystemState
from .broker import Broker, RoutingTable
from .client import Client
from .kmf import Kmf, SecurityToken, TokenVerifier
from .monitoring import MarkovPredictor, Monitor, NaiveBayesBottleneck
from .sim import RunReport, export_report, run_scenario
from .trust import TrustEngine
from .wire import Envelope

__version__ = "0.1.0"

__all__ = [
    "AdaptationAction",
    "AdaptationManager",
    "AsmParams",
    "Broker",
    "Client",
    "Envelope",
    "Kmf",
    "MarkovPredictor",
    "Monitor",
    "NaiveBayesBottleneck",
    "RoutingTable",
    "RunReport",
    "SecurityToken",
    "SystemState",
    "TokenVerifier",
    "TrustEngine",
    "export_report",
    "run_scenario",
]
