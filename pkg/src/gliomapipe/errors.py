"""Exception types raised across the pipeline."""


class PipelineError(Exception):
    """Base class for every error raised by gliomapipe."""


class ConfigError(PipelineError):
    def __init__(self, message, key_path=None):
        self.key_path = key_path
        if key_path:
            message = f"{key_path}: {message}"
        super().__init__(message)


class StageDependencyError(PipelineError):
    def __init__(self, missing):
        self.missing = str(missing)
        super().__init__(f"missing upstream artifact: {self.missing}")


class IoError(PipelineError):
    """A file exists but cannot be read or decoded."""


class MissingModality(PipelineError):
    def __init__(self, modality, case_dir):
        self.modality = modality
        super().__init__(f"{case_dir}: no volume for modality {modality}")


class ShapeMismatch(PipelineError):
    pass


class ShapeError(PipelineError, ValueError):
    pass


class InvalidLabel(PipelineError):
    def __init__(self, value, count):
        self.value = int(value)
        self.count = int(count)
        super().__init__(f"label value {self.value} found in {self.count} voxels; allowed {{0,1,2,4}}")


class ParseError(PipelineError):
    def __init__(self, line, reason):
        self.line = line
        super().__init__(f"line {line}: {reason}")


class EmptyDataset(PipelineError):
    pass


class TooFewCases(PipelineError):
    pass


class IncompatibleWeights(PipelineError):
    pass


class TrainingDiverged(PipelineError):
    def __init__(self, epoch, region=None):
        self.epoch = epoch
        self.region = region
        where = f" ({region})" if region else ""
        super().__init__(f"non-finite loss at epoch {epoch}{where}")


class StageError(PipelineError):
    """Wraps an error raised inside one cascade stage."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage}: {cause}")


class EmptyInput(PipelineError):
    pass


class EmptyBrainMask(PipelineError):
    pass


class EmptyRegion(PipelineError):
    pass


class TooFewSamples(PipelineError):
    pass


class InvalidFeature(PipelineError):
    def __init__(self, index):
        self.index = index
        super().__init__(f"non-finite value in feature column {index}")


class FeatureSchemaMismatch(PipelineError):
    pass


class InvalidInput(PipelineError, ValueError):
    pass
