"""Asynchronous action-chunking laboratory.

Implements and compares asynchronous chunk-inference methods (naive,
IT-RTC, TT-RTC, VLASH, A2C2) on toy continuous-control environments with a
small flow-matching chunk policy, plus an analytic FLOPs cost model with
delay mapping and break-even analysis.
"""

from .backend import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
