# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

"""Sphinx directive that documents the registered statsd metrics.

Usage::

    .. autometrics:: lqrinfluence.libmarkus.STATSD_METRICS

Metrics are grouped by the module that emits them, which is the second
dotted segment of the key (``lqrinfluence.ident.cg_iterations`` is emitted
by ``ident``).

"""

from collections import defaultdict
import importlib
import textwrap

from docutils import nodes
from docutils.parsers.rst import Directive
from docutils.statemachine import ViewList

from lqrinfluence.util import build_table


def group_metrics(metrics):
    groups = defaultdict(list)
    for key, metric in metrics.items():
        parts = key.split(".")
        group = parts[1] if len(parts) > 2 else "lqrinfluence"
        groups[group].append((key, metric))
    return dict(sorted(groups.items()))


class AutoMetricsDirective(Directive):
    has_content = False
    required_arguments = 1
    optional_arguments = 0
    final_argument_whitespace = False

    option_spec = {}

    def add_line(self, line, source, *lineno):
        self.result.append(line, source, *lineno)

    def generate_docs(self, dotted_path):
        modpath, name = dotted_path.rsplit(".", 1)
        metrics = getattr(importlib.import_module(modpath), name)
        sourcename = f"metrics of {dotted_path}"

        table = [("Key", "Type", "Emitted by")]
        for group, items in group_metrics(metrics).items():
            for key, metric in items:
                table.append((f":py:data:`{key}`", metric["type"], group))

        self.add_line("Table of metrics:", sourcename)
        self.add_line("", sourcename)
        for line in build_table(table):
            self.add_line(line, sourcename)
        self.add_line("", sourcename)

        for key, metric in metrics.items():
            self.add_line(f".. py:data:: {key}", sourcename)
            self.add_line("", sourcename)
            self.add_line(f"   **Type**: ``{metric['type']}``", sourcename)
            self.add_line("", sourcename)
            for line in textwrap.dedent(metric["description"]).splitlines():
                self.add_line(f"   {line}", sourcename)
            self.add_line("", sourcename)

    def run(self):
        self.result = ViewList()
        self.generate_docs(self.arguments[0])
        if not self.result:
            return []

        node = nodes.paragraph()
        node.document = self.state.document
        self.state.nested_parse(self.result, 0, node)
        return node.children


def setup(app):
    """Register directive in Sphinx."""
    app.add_directive("autometrics", AutoMetricsDirective)

    return {
        "version": 1.0,
        "parallel_read_safe": True,
        "parallel_write_safe": True,
    }
