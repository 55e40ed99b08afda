"""Deterministic discrete-event network: links with latency/bandwidth/loss,
miniature TCP endpoints providing the end-to-end reliability the load
balancer deliberately omits, and HTTP request/response applications."""

from .events import EventQueue
from .link import Link, LinkParams
from .sim import Simulation, SimParams, TopologyParams, WorkloadParams, run

__all__ = ["EventQueue", "Link", "LinkParams", "Simulation", "SimParams",
           "TopologyParams", "WorkloadParams", "run"]
