"""Simulated self-supervised underwater grasp data collection.

Modules: ``camera`` (distortion, plane-at-depth warps), ``sim``/``render``
(pool simulator and oracle perception), ``controller`` (staged PD grasp
controller), ``labeling`` (closure detection, contact backtracking, dataset
export), ``harness`` (campaigns, suites, replay) and ``cli``.
"""

__version__ = "0.1.0"
