# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

import logging


LOGGER = logging.getLogger(__name__)


class InverseHvpBase:
    """Inverse Hessian-vector product backend base class.

    Backends turn a right-hand side ``v`` into ``H^{-1} v`` for a fitted
    :py:class:`lqrinfluence.ident.RidgeFit`. Every influence score in a run
    goes through the configured backend.

    """

    class Config:
        pass

    #: Short label written into reports
    name = "base"

    def __init__(self, config):
        self.config = config.with_options(self)

    def solve(self, fit, v):
        """Return ``H^{-1} v``.

        :arg fit: the :py:class:`lqrinfluence.ident.RidgeFit`
        :arg v: vector of length ``p``

        :returns: vector of length ``p``

        """
        raise NotImplementedError

    def bind(self, fit):
        """Return a ``v -> H^{-1} v`` callable for ``fit``."""

        def _inverse_hvp(v):
            return self.solve(fit, v)

        return _inverse_hvp


class CholeskyInverseHvp(InverseHvpBase):
    """Direct solve through the Cholesky factor cached on the fit.

    This is the default. It costs one back-substitution per right-hand side.

    """

    name = "cholesky"

    def solve(self, fit, v):
        return fit.solve(v)
