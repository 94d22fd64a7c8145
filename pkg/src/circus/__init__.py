"""circus: autonomous experiment control at desk scale.

Distributed slow control (actors, watchdogs, scheduling, DAQ, analysis)
unified with a deterministic nanosecond-precise simulated hardware timeline
and closed-loop self-optimization.
"""

__version__ = "0.1.0"
