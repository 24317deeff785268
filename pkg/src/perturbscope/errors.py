"""Exception types raised across perturbscope.

Plain argument problems (bad shapes, out-of-range parameters) raise the
builtin ``ValueError``; the classes here cover the failure modes callers
are expected to handle distinctly.
"""


class PerturbscopeError(Exception):
    """Base class for all package errors."""


class ImageIOError(PerturbscopeError, OSError):
    """Reading or writing a raster failed; the message carries the path."""


class PmapFormatError(PerturbscopeError, ValueError):
    """A PMAP file is malformed (bad magic, version, or length)."""


class InfeasibleTargetError(PerturbscopeError, ValueError):
    """A mask cannot reach the requested lightness by gamma adjustment."""


class AdapterError(PerturbscopeError, RuntimeError):
    """The external reconstructor failed, timed out, or broke protocol."""

    def __init__(self, message, *, returncode=None, stdout="", stderr=""):
        super().__init__(message)
        self.returncode = returncode
        self.stdout = stdout
        self.stderr = stderr


class MissingStageError(PerturbscopeError):
    """An upstream analysis stage has not produced the artifact needed."""

    def __init__(self, stage):
        super().__init__(f"missing upstream stage: {stage}")
        self.stage = stage


class UndefinedScoreError(PerturbscopeError, ValueError):
    """A clustering score is undefined for the given grouping."""
