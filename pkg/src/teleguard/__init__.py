"""Failure-aware shared-autonomy teleoperation at desk scale.

Offline pipeline: record teleoperation episodes in a planar contact
environment, broadcast outcome rewards, train a conservative success score
(critic with an out-of-distribution penalty and a short-horizon failure
head), then train a guidance actor against the frozen critic.  Online:
render the actor's suggestion through a value-gated velocity-attractor
impedance on the leader side, so assistance ramps up only when the score
says the operator's command is drifting toward failure.
"""

__version__ = "0.1.0"
