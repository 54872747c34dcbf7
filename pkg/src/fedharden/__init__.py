"""Deterministic federated-learning backdoor simulator with trigger-inversion
hardening, low-confidence rejection, and executable robustness bounds."""

from .data import LabeledDataset, PartitionPlan, TriggerSpec
from .federation import ClientState, FederationConfig, RoundRecord
from .guard import InferenceVerdict, MetricSet
from .inversion import DistanceMatrix, InversionConfig, InversionResult
from .model import LinearModel, SgdConfig
from .numerics import SeededRng
from .theory import (BoundPair, RejectionForecast, RobustnessCertificate,
                     TheoryConfig, TheoryReport)

__all__ = [
    "LabeledDataset", "PartitionPlan", "TriggerSpec",
    "ClientState", "FederationConfig", "RoundRecord",
    "InferenceVerdict", "MetricSet",
    "DistanceMatrix", "InversionConfig", "InversionResult",
    "LinearModel", "SgdConfig", "SeededRng",
    "BoundPair", "RejectionForecast", "RobustnessCertificate",
    "TheoryConfig", "TheoryReport",
]

__version__ = "0.1.0"
