"""Robust linear MPC with optimized constraint tightening.

The offline stage picks a disturbance-feedback structure that minimizes the
constraint tightening; the online stage then solves a QP with the same size as
tube MPC. Tube MPC, full disturbance feedback and nominal MPC are included for
comparison.
"""
__version__ = "0.1.0"

from .qp import KERNEL  # noqa: E402,F401
