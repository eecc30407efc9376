"""Riskgraph Exception Types."""


class RiskGraphError(Exception):
    """Top level exception raised by riskgraph functions."""


class BadConfig(RiskGraphError):
    """A configuration value violates its invariant."""


class NoHazardSource(RiskGraphError):
    """The catalog has no hazard-attributed object for a room type."""


class BadSplit(RiskGraphError):
    """Requested dataset split does not sum to the scene count."""


class BackendUnavailable(RiskGraphError):
    """An annotation or planning backend could not be reached."""


class SchemaViolation(RiskGraphError):
    """Backend returned JSON that does not match the annotation schema."""

    def __init__(self, message, raw=None):
        """Keep the raw payload for inspection."""
        super().__init__(message)
        self.raw = raw


class UnknownRiskLevel(RiskGraphError):
    """Risk level label is not one of low, medium, high."""


class InvalidRiskValue(RiskGraphError):
    """Numeric risk value is not one of 0.25, 0.50, 1.00."""


class MissingAnnotation(RiskGraphError):
    """The annotation cache has no entry for a category pair."""

    def __init__(self, pair):
        """Keep the offending pair."""
        super().__init__(f"No annotation for pair: {pair[0]}|{pair[1]}")
        self.pair = pair


class NumericalFailure(RiskGraphError):
    """A forward pass produced NaN or infinite values."""

    def __init__(self, message, layer):
        """Keep the index of the layer that failed."""
        super().__init__(f"{message} (layer {layer})")
        self.layer = layer


class ProbabilityDomain(RiskGraphError):
    """Probability outside the open interval (0, 1)."""


class TrainingDiverged(RiskGraphError):
    """Training loss became NaN."""

    def __init__(self, epoch):
        """Keep the epoch where divergence was detected."""
        super().__init__(f"Training diverged at epoch {epoch}")
        self.epoch = epoch


class IncompatibleCheckpoint(RiskGraphError):
    """Checkpoint file is corrupt or from an incompatible version."""


class UnterminatedPlan(RiskGraphError):
    """Plan text has no DONE line."""


class UnknownAction(RiskGraphError):
    """A plan line does not match any known verb phrase."""

    def __init__(self, line):
        """Keep the unparsable line."""
        super().__init__(f"Unknown action: {line!r}")
        self.line = line


class PlanParseFailure(RiskGraphError):
    """Backend reply could not be parsed after all retries."""


class ActionInfeasible(RiskGraphError):
    """An action references entities that do not exist or cannot move."""


class NoPositives(RiskGraphError):
    """Precision-recall analysis needs at least one positive label."""
