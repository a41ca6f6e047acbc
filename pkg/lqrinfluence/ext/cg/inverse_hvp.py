# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

import logging

from everett.manager import Option

from lqrinfluence.ext.inverse_hvp_base import InverseHvpBase
from lqrinfluence.ident import cg_inverse_hvp


LOGGER = logging.getLogger(__name__)


def positive_float(value):
    parsed = float(value)
    if not parsed > 0:
        raise ValueError(f"{value!r} is not a positive number")
    return parsed


def positive_int(value):
    parsed = int(value)
    if parsed < 1:
        raise ValueError(f"{value!r} is not a positive integer")
    return parsed


class CgInverseHvp(InverseHvpBase):
    """Conjugate-gradient inverse Hessian-vector products.

    Never factors ``H``. With ``matrix_free`` on, each CG step applies ``H``
    from the stacked regressor rows, so memory stays linear in the number of
    transitions.

    When set as the inverse-HVP backend, you need to configure it like this::

        influence_inverse_hvp_class: lqrinfluence.ext.cg.inverse_hvp.CgInverseHvp

    Optionally::

        influence_inverse_hvp_cg_tol: 1e-12
        influence_inverse_hvp_cg_max_iter: 500

    """

    name = "cg"

    class Config:
        cg_tol = Option(
            default="1e-10",
            parser=positive_float,
            doc="relative residual tolerance ``||H x - v|| <= tol ||v||``",
        )
        cg_max_iter = Option(
            default="1000",
            parser=positive_int,
            doc="maximum number of CG iterations per right-hand side",
        )
        matrix_free = Option(
            default="true",
            parser=bool,
            doc="apply H from the regressor rows instead of the cached Gram block",
        )

    def __init__(self, config):
        super().__init__(config)
        self.cg_tol = self.config("cg_tol")
        self.cg_max_iter = self.config("cg_max_iter")
        self.matrix_free = self.config("matrix_free")

    def solve(self, fit, v):
        return cg_inverse_hvp(
            fit,
            v,
            tol=self.cg_tol,
            max_iter=self.cg_max_iter,
            matrix_free=self.matrix_free,
        )
