"""Informativeness-aware token merging for bidirectional selective-SSM vision models.

Everything runs on NumPy with a small numba kernel for the scan. The main
entry points are :mod:`mamelab.merge` (scoring, matching, arrangement),
:mod:`mamelab.model` (the toy classifier), :mod:`mamelab.train`,
:mod:`mamelab.bench` and the ``mamelab`` command line.
"""

__version__ = "0.1.0"
