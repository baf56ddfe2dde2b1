"""Normative 3D shape model with zero- and few-shot anomaly detection.

Masks are ``MaskVolume`` objects; ``MaskVolume(array, spacing)`` accepts a
3-D array indexed ``[x, y, z]`` and ``to_numpy()`` returns the same layout.
"""

from ._core import *  # noqa: F401,F403
from ._core import NormshapeError, __version__  # noqa: F401
