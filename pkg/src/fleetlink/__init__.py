"""fleetlink: fleet analytics orchestration with live module replacement."""

__version__ = "0.1.0"
