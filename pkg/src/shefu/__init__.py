"""Switching head/tail funnel transformer for matching an instruction's target
object and destination against detected region candidates."""

__version__ = "0.1.0"
