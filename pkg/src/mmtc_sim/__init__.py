"""Monte-Carlo simulator for grant-free massive-MIMO random access.

Submodules: :mod:`config`, :mod:`model` (scenario and received signal), :mod:`amp`
(activity detection), :mod:`noncoh` (pilot-index transmission and M-AMP),
:mod:`coherent` (channel estimation, MRC, coded payloads), :mod:`theory` (analytic
oracles) and :mod:`harness` (figure presets and the Monte-Carlo runner).
"""

from .config import PilotKind, PowerPolicy, SystemConfig

__all__ = ["SystemConfig", "PilotKind", "PowerPolicy"]
__version__ = "0.1.0"
