"""tacforge: a simulation-grounded workbench for tactile force transfer.

Simulates elastomer contact (MPM), renders marker-based binary tactile
images for arbitrary sensor patterns, translates deformed images across
patterns, transfers force labels (optionally material-compensated), and
trains a spatio-temporal force regressor on the transferred data.
"""

__version__ = "0.1.0"
