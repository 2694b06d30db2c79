"""Exception hierarchy.

Every error carries the CLI exit code of its family so the command-line
entry point can map failures without a lookup table.
"""


class EchoError(Exception):
    exit_code = 1


class ConfigError(EchoError):
    exit_code = 2


class DataError(EchoError):
    exit_code = 3


class TrainingError(EchoError):
    exit_code = 4


class OntologyError(EchoError):
    exit_code = 5


# configuration
class SchemaViolation(ConfigError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class ConfigInvalid(ConfigError):
    pass


# data / ingest / evaluation
class MissingColumn(DataError):
    pass


class UnknownLabel(DataError):
    pass


class EmptyManifest(DataError):
    pass


class DecodeFailure(DataError):
    pass


class UnsupportedEncoding(DataError):
    pass


class LengthMismatch(DataError):
    pass


class MissingFold(DataError):
    pass


class DuplicateFold(DataError):
    pass


class IncomparableReports(DataError):
    pass


class PerplexityInfeasible(DataError):
    pass


class NonFiniteGradient(DataError):
    pass


# model / training
class UnknownBackbone(TrainingError):
    pass


class EmbeddingDimMismatch(TrainingError):
    pass


class PretrainedWeightsUnavailable(TrainingError):
    pass


class CorruptCheckpoint(TrainingError):
    pass


class ConfigHashMismatch(TrainingError):
    pass


class ShapeMismatch(TrainingError):
    pass


class EmptySplit(TrainingError):
    pass


class NonFiniteLoss(TrainingError):
    pass


# ontology
class ClassCountTooSmall(OntologyError):
    pass


class InvalidParentCount(OntologyError):
    pass


class UnparseableReply(OntologyError):
    def __init__(self, message, violations=()):
        self.violations = list(violations)
        super().__init__(message)


class ProviderUnreachable(OntologyError):
    pass


class OntologyGenerationFailed(OntologyError):
    def __init__(self, message, attempts=0):
        self.attempts = attempts
        super().__init__(message)


class UnassignedLabel(OntologyError):
    pass


class OntologyMismatch(OntologyError):
    pass
