"""Charts from ringpaxos benchmark CSV files."""

from .render import BenchCsv, PlotSpec, SchemaError, render

__all__ = ["BenchCsv", "PlotSpec", "SchemaError", "render"]
