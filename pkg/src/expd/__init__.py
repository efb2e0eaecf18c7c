"""Remote experiment launcher: snapshots, scheduling, executor agents and
buffered debug/terminal channels."""

__version__ = "0.1.0"
