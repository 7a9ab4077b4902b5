"""Weighted conditional flow matching on 2D toy transport problems.

Modules: ``toydata`` (distributions), ``fieldnet`` (MLP field and Adam),
``coupling`` (pairing strategies and OT solvers), ``trainer``,
``flow_ode`` (Euler and Dopri5), ``metrics``, ``diagnostics`` (epsilon
scan and consistency checks), ``benchmark`` and ``cli``.
"""

from . import _backend, benchmark, coupling, diagnostics, fieldnet, flow_ode, metrics, toydata, trainer
from .coupling import CostSpec
from .errors import FlowMatchError
from .fieldnet import VectorFieldNet
from .toydata import Distribution2DSpec
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = ["benchmark", "coupling", "diagnostics", "fieldnet", "flow_ode", "metrics", "toydata",
           "trainer", "CostSpec", "Distribution2DSpec", "FlowMatchError", "TrainConfig",
           "VectorFieldNet", "train", "backend_name"]


def backend_name():
    """``"compiled"`` or ``"python"``: the kernel set in use."""
    return _backend.name()
