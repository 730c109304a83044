"""Exception hierarchy shared by every module.

The CLI maps :class:`ValidationError` (and its subclasses) to exit code 2 and
every other :class:`SupersegError` to exit code 1.
"""


class SupersegError(Exception):
    """Base class for all library errors."""


class ValidationError(SupersegError, ValueError):
    """Input data violates a documented invariant."""


class ParseError(ValidationError):
    """A file could not be parsed under its declared format."""

    def __init__(self, message, path=None, line=None, offset=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"offset {offset}")
        prefix = ":".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.path = path
        self.line = line
        self.offset = offset


class DomainError(SupersegError, ValueError):
    """Operation called outside its mathematical domain (e.g. an empty set)."""


class LabelConflictError(SupersegError):
    """Two clicks of different instances landed in the same superpoint."""

    def __init__(self, superpoint, instance_a, instance_b):
        super().__init__(
            f"superpoint {superpoint} received clicks of instances {instance_a} and {instance_b}"
        )
        self.superpoint = superpoint
        self.instances = (instance_a, instance_b)


class GenerationError(SupersegError):
    """Synthetic scene generation failed after bounded retries."""


class PipelineError(SupersegError):
    """Wraps an error raised inside a named pipeline stage."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
