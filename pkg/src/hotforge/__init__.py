"""Trampoline instrumentation, hotpatch synthesis and patch dispatch for a small SSA IR."""

__version__ = "0.1.0"
