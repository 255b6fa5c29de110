"""Exception hierarchy shared by all modules."""


class SimtCnnError(Exception):
    """Base class for every error raised by simtcnn."""


class DimensionError(SimtCnnError, ValueError):
    pass


class ConfigurationError(SimtCnnError, ValueError):
    pass


class NumericDomainError(SimtCnnError, ValueError):
    pass


class ClassificationError(SimtCnnError, ValueError):
    pass


class FormatError(SimtCnnError, ValueError):
    """Malformed IDX or weight file.

    ``offset`` is the byte position where parsing failed, ``section`` the
    weight-file section name when relevant.
    """

    def __init__(self, message, offset=None, section=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset
        self.section = section


class LaunchError(SimtCnnError, RuntimeError):
    """A kernel thread raised; carries the faulting block and thread ids."""

    def __init__(self, message, block_id=None, thread_id=None):
        if block_id is not None:
            message = f"{message} [block={block_id} thread={thread_id}]"
        super().__init__(message)
        self.block_id = block_id
        self.thread_id = thread_id


class DataRaceError(LaunchError):
    pass


class BarrierDivergenceError(LaunchError):
    pass


class TrainingError(SimtCnnError, RuntimeError):
    def __init__(self, message, epoch=None, sample=None):
        super().__init__(f"{message} (epoch={epoch} sample={sample})")
        self.epoch = epoch
        self.sample = sample
