"""Statement-level vulnerability localization.

Trains a statement selection network jointly with a function-level
classifier so that the statements kept by the selector are the ones
that carry the vulnerability signal.
"""

__version__ = "0.1.0"
