"""Linear, state-space and second-order attention variants in numpy.

Every attention variant has a quadratic reference forward, an analytic
backward checked against finite differences, and (where one exists) a
token-by-token stateful path with exact memory accounting.
"""

from .backward import GradBundle, block_backward, finite_diff_oracle, relative_error
from .config import PRESETS, BlockWeights, VariantConfig, init_block_weights, preset
from .errors import (ConfigurationError, DimensionError, DivergenceError, DomainError,
                     NonFiniteError, OracleError, PreconditionError, SeqmixError)
from .forward import attention_kernel, block_forward, variant_forward
from .maskgen import DecayLogits, DecayMatrix, build_decay_matrix, causal_mask
from .memmodel import crossover, memcurve, term_count
from .recurrence import KVCache, RecurrentState, phi2, run_stateful
from .tensorops import ConvSpec, causal_conv1d, matmul

__version__ = "0.1.0"

__all__ = [
    "BlockWeights", "ConfigurationError", "ConvSpec", "DecayLogits", "DecayMatrix",
    "DimensionError", "DivergenceError", "DomainError", "GradBundle", "KVCache", "NonFiniteError",
    "OracleError", "PRESETS", "PreconditionError", "RecurrentState", "SeqmixError", "VariantConfig",
    "attention_kernel", "block_backward", "block_forward", "build_decay_matrix", "causal_conv1d",
    "causal_mask", "crossover", "finite_diff_oracle", "init_block_weights", "matmul", "memcurve",
    "phi2", "preset", "relative_error", "run_stateful", "term_count", "variant_forward",
]
