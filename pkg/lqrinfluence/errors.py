# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

"""Exception hierarchy.

Every exception raised on purpose by lqrinfluence subclasses one of the four
category classes below. The command line maps the category to an exit code so
harnesses can tell configuration problems from bad data, numerical trouble, and
models that can't be stabilized.

"""

import contextlib

import numpy as np


class LqrInfluenceError(Exception):
    """Base class for lqrinfluence errors.

    :arg msg: the error message
    :arg stage: the pipeline stage that failed, if known

    """

    exit_code = 1

    def __init__(self, msg, stage=None):
        super().__init__(msg)
        self.stage = stage

    def __str__(self):
        msg = super().__str__()
        if self.stage:
            return f"[{self.stage}] {msg}"
        return msg


class ConfigError(LqrInfluenceError):
    """Configuration is malformed, has unknown keys, or has bad values."""

    exit_code = 2


class DataError(LqrInfluenceError):
    """Input data is malformed, inconsistent, or missing."""

    exit_code = 3


class NumericsError(LqrInfluenceError):
    """A numerical kernel failed."""

    exit_code = 4


class AssumptionViolated(LqrInfluenceError):
    """The identified model violates the stabilizability assumption.

    :arg rho: spectral radius of the closed loop, if one was computed

    """

    exit_code = 5

    def __init__(self, msg, rho=None, stage=None):
        super().__init__(msg, stage=stage)
        self.rho = rho


@contextlib.contextmanager
def stage(name):
    """Tag errors raised inside the block with a stage name.

    ``numpy.linalg.LinAlgError`` is converted to :py:class:`NumericsError`.

    """
    try:
        yield
    except LqrInfluenceError as exc:
        if exc.stage is None:
            exc.stage = name
        raise
    except np.linalg.LinAlgError as exc:
        raise NumericsError(str(exc), stage=name) from exc


class NoConvergence(NumericsError):
    """An iterative solver hit its iteration cap.

    :arg iterations: iterations performed
    :arg residual: last residual norm

    """

    def __init__(self, msg, iterations=None, residual=None, stage=None):
        super().__init__(msg, stage=stage)
        self.iterations = iterations
        self.residual = residual


class NonFinite(NumericsError):
    """A simulation or computation produced inf/nan or blew up."""


class DimensionMismatch(DataError):
    pass


class EmptyDataset(DataError):
    pass


class MalformedFile(DataError):
    pass


class IdMismatch(DataError):
    pass


class DegenerateInput(DataError):
    """Inputs for which a statistic is undefined (for example zero variance)."""
