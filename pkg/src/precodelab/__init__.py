"""Multi-user MIMO downlink precoding laboratory.

Exact iterative WMMSE solvers, an SVD-based reduction of the MIMO precoding
problem to a virtual MISO one with closed-form precoder recovery, a small
neural power-allocation predictor with structured pruning, baselines, a
wideband channel simulator and a reproducible benchmark harness.

Core names are re-exported lazily so the command-line front end can cap
BLAS thread counts before numpy loads.
"""

__all__ = [
    "ChannelSet",
    "ConfigError",
    "KeyFeatures",
    "NumericalError",
    "PackedInput",
    "PrecodingError",
    "PrecoderSet",
    "SystemConfig",
    "VirtualMisoProblem",
    "WmmseTrace",
    "column_normalize",
    "normalize_vector",
    "pack_hermitian",
    "sum_rate_mimo",
    "sum_rate_ofdm",
    "unpack_hermitian",
    "weighted_gram",
]

__version__ = "0.1.0"


def __getattr__(name):
    if name in __all__:
        from . import core

        return getattr(core, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
