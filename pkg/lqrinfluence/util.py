# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

import datetime
import json
import logging
import os
from pathlib import Path
import tempfile

import isodate
import numpy as np


LOGGER = logging.getLogger(__name__)


UTC = isodate.UTC


def utc_now():
    """Return a timezone aware datetime instance in UTC timezone.

    Compare:

        >>> from lqrinfluence.util import utc_now
        >>> utc_now()
        datetime.datetime(2026, 1, 5, 16, 42, 13, 639834,
          tzinfo=<isodate.tzinfo.Utc object at 0x101475210>)

    Versus:

        >>> import datetime
        >>> from lqrinfluence.util import UTC
        >>> datetime.datetime.now(UTC)

    """
    return datetime.datetime.now(UTC)


def utc_now_isoformat():
    """Return the current time as an ISO 8601 string with a ``Z`` suffix."""
    return isodate.datetime_isoformat(utc_now().replace(microsecond=0))


def _to_jsonable(value):
    if isinstance(value, np.ndarray):
        return [_to_jsonable(item) for item in value.tolist()]
    if isinstance(value, (np.floating, float)):
        value = float(value)
        if not np.isfinite(value):
            # JSON has no representation for these
            return None
        return value
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, dict):
        return {str(key): _to_jsonable(val) for key, val in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_jsonable(item) for item in value]
    return value


def json_ordered_dumps(data):
    """Dump Python data into JSON with sorted keys.

    numpy scalars and arrays are converted to Python values first. Floats are
    written with the shortest representation that round-trips exactly, so
    reading back yields bit-identical doubles. Non-finite floats become
    ``null``.

    This returns a str. If you need bytes, do this::

         json_ordered_dumps(data).encode('utf-8')

    :arg varies data: The data to convert to JSON

    :returns: string

    """
    return json.dumps(
        _to_jsonable(data), sort_keys=True, separators=(",", ":"), allow_nan=False
    )


def atomic_write_text(path, text):
    """Write text to a file by writing a temp file and renaming it.

    Readers never see a half-written file.

    :arg path: the destination path
    :arg str text: the contents

    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fp:
            fp.write(text)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    LOGGER.debug("wrote %s", path)


def build_table(table):
    """Render rows of strings as a plain-text table.

    The first row is the header.

    :arg table: list of tuples of str

    :returns: generator of lines

    """
    col_size = [0] * len(table[0])
    for row in table:
        for i, col in enumerate(row):
            col_size[i] = max(col_size[i], len(col))

    col_size = [width + 2 for width in col_size]

    yield "  ".join("=" * width for width in col_size)
    yield "  ".join(
        header + (" " * (width - len(header)))
        for header, width in zip(table[0], col_size, strict=True)
    ).rstrip()
    yield "  ".join("=" * width for width in col_size)
    for row in table[1:]:
        yield "  ".join(
            col + (" " * (width - len(col)))
            for col, width in zip(row, col_size, strict=True)
        ).rstrip()
    yield "  ".join("=" * width for width in col_size)
