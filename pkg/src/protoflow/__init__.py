"""Desk-scale controllable generation stack.

Curation, prototype-bank hybrid retrieval, multi-stream condition fusion,
flow-matching training/sampling with a mini diffusion transformer, and the
metric harness to check all of it against brute-force oracles.
"""

__version__ = "0.1.0"
