"""Distributed, fair beaconing-rate control for vehicular networks.

A discrete-time simulator plus a centralized solver for the beaconing
network-utility-maximization problem.  Submodules:

* :mod:`fabricsim.model`       parameters and shared domain types
* :mod:`fabricsim.scenario`    vehicle placement and mobility
* :mod:`fabricsim.channel`     path loss, fading, neighbor graphs, delivery
* :mod:`fabricsim.oracle`      centralized optimum and fairness certificates
* :mod:`fabricsim.controllers` per-vehicle rate controllers
* :mod:`fabricsim.engine`      the simulation loop
* :mod:`fabricsim.metrics`     post-run analysis
* :mod:`fabricsim.cli`         command-line front end
"""

from fabricsim.model import SimParams, VehicleState, RateAllocation, NeighborGraph

__version__ = "0.1.0"

__all__ = ["SimParams", "VehicleState", "RateAllocation", "NeighborGraph", "__version__"]
