"""Spatio-temporal PM2.5 modelling core modules.

Flat modules imported by bare name once `src/` is on `sys.path`, as `cli.py`
and the root-level tests do.
"""
