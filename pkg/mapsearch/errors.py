class MapSearchError(Exception):
    """Base class for every error raised by mapsearch."""


class ConfigError(MapSearchError):
    """Bad experiment config, accelerator parameters or search settings."""


class InvalidProblemError(MapSearchError):
    pass


class InvalidMappingError(MapSearchError):
    pass


class EmptyMapSpaceError(MapSearchError):
    """The (problem, accelerator) pair admits no valid mapping."""


class SchemaError(MapSearchError):
    """Vector length, tensor shape or record format does not match its schema."""


class DatasetExistsError(MapSearchError):
    """Dataset files are only ever appended to; regenerating needs an explicit overwrite."""


class ModelFileError(MapSearchError):
    pass


class FingerprintMismatchError(MapSearchError):
    pass


class SimulationCapError(MapSearchError):
    pass


class TrainingDivergedError(MapSearchError):
    pass


class RaggedTraceError(MapSearchError):
    pass
