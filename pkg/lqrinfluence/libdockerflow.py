# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

import json
from pathlib import Path

from lqrinfluence import __version__


def get_version_info(basedir):
    """Given a basedir, retrieves build information for this checkout.

    ``version.json`` is optional. When it's missing or malformed, the package
    version is used and there is no commit.

    :arg str basedir: the path of the base directory where ``version.json``
        might exist

    :returns: version info as a dict with at least a ``version`` key

    """
    info = {"version": __version__}
    path = Path(basedir) / "version.json"
    if not path.exists():
        return info

    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError):
        return info

    if isinstance(data, dict):
        info.update(data)
    return info


def get_release_name(basedir):
    version_info = get_version_info(basedir)
    commit = version_info.get("commit")
    commit = commit[:8] if commit else "unknown"
    return f"{version_info['version']}:{commit}"
