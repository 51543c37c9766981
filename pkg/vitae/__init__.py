"""
Vision transformer with reduction and normal cells, written on a small
numpy autodiff engine.
"""

__version__ = "0.1.0"
