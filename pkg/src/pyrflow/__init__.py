"""Coarse-to-fine recurrent optical flow with cross-covariance global context.

Plain-numpy reference implementation: multi-scale feature consolidation,
linear-complexity global-context attention, context-guided motion grouping,
and recurrent refinement with learned convex upsampling, plus training,
evaluation, flow file IO, and an attention memory benchmark.
"""

from .autodiff import Parameter, Tensor, no_grad

__all__ = ["Tensor", "Parameter", "no_grad"]

__version__ = "0.1.0"
