"""Momentum delta rule linear attention in numpy.

A fast-weight state ``S`` is driven through a momentum matrix ``M``::

    v~ = v - S^T p          (p = alpha k by default)
    M' = mu M - eta k v~^T
    S' = alpha S - beta M'
    o  = S'^T q

``mdn_recurrent_forward`` runs this token by token; ``mdn_chunkwise_forward``
computes the same thing chunk-parallel.
"""
from .adjoint import GradBundle, gradient_check, mdn_recurrent_backward
from .chunkwise import mdn_chunkwise_forward
from .coefficients import ChunkCoeffs, chunk_coefficients, naive_coefficients
from .gating import GateConfig, GateSeq, compute_gates
from .mqar import TrainConfig, generate_mqar, train_toy
from .recurrent import AttnInputs, DualState, mdn_recurrent_forward, mdn_step, state_change_norm
from .spectral import SpectralReport, closed_form_spectrum, stability_condition, transition_matrix

__version__ = "0.1.0"

__all__ = [
    "AttnInputs", "ChunkCoeffs", "DualState", "GateConfig", "GateSeq", "GradBundle",
    "SpectralReport", "TrainConfig", "chunk_coefficients", "closed_form_spectrum",
    "compute_gates", "generate_mqar", "gradient_check", "mdn_chunkwise_forward",
    "mdn_recurrent_backward", "mdn_recurrent_forward", "mdn_step", "naive_coefficients",
    "stability_condition", "state_change_norm", "train_toy", "transition_matrix",
]
