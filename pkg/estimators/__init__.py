"""
Empirical estimators: prior draws, importance-sampling oracle and Langevin chains
"""

from .importance import ImportanceEstimate, importance_oracle
from .langevin import ChainState, KernelEstimate, langevin_step, run_chains
from .network import NetworkParameters, check_gradient, forward, grad_energy
from .prior_draws import KernelMoments, draw_prior_kernels
from .trace_stream import TraceWriter, read_trace, summarize_trace

__all__ = [
    "ChainState",
    "ImportanceEstimate",
    "KernelEstimate",
    "KernelMoments",
    "NetworkParameters",
    "TraceWriter",
    "check_gradient",
    "draw_prior_kernels",
    "forward",
    "grad_energy",
    "importance_oracle",
    "langevin_step",
    "read_trace",
    "run_chains",
    "summarize_trace",
]
