"""Discrete-event simulator of virtual-address RDMA with IOMMU page faults."""

from .sim import Simulator
from .system import Node, System

__version__ = "0.1.0"
