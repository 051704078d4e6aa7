"""Per-annotation rationality weighting for Bradley-Terry reward learning.

The package simulates cognitively biased preference annotation, scores each
annotation with a bias detector, turns those scores into per-pair rationality
weights and trains reward models and a toy group-relative policy on the result.
"""

from dynbeta.core import (
    BetaConfig,
    BetaMode,
    PreferencePair,
    Provenance,
    Question,
    Response,
    assign_betas,
    beta_dynamic,
    beta_scenario_variant,
    resolve_auto_threshold,
)
from dynbeta.errors import (
    ConfigError,
    DataError,
    InputDomainError,
    LabError,
    ProtocolError,
    TrainingError,
    TransportError,
)

__version__ = "0.1.0"

__all__ = [
    "BetaConfig",
    "BetaMode",
    "ConfigError",
    "DataError",
    "InputDomainError",
    "LabError",
    "PreferencePair",
    "ProtocolError",
    "Provenance",
    "Question",
    "Response",
    "TrainingError",
    "TransportError",
    "assign_betas",
    "beta_dynamic",
    "beta_scenario_variant",
    "resolve_auto_threshold",
]
