"""Conditional Schrodinger bridge time-series imputation."""

from ._sbridge import (
    AbsoluteContinuityError,
    ContractError,
    ConvergenceTrace,
    Dataset,
    DivergenceError,
    DomainError,
    IoError,
    ParseError,
    PolicyPair,
    SdeKind,
    SdeSpec,
    SignalConfig,
    TrainConfig,
    ValidationError,
    Window,
    __version__,
    crps,
    diagnose_trace,
    diffusion_coefficient,
    em_forward,
    make_dataset,
    rmse_mae,
    run_aipf,
    schedule_moments,
    train,
)

__all__ = [name for name in dir() if not name.startswith("_")] + ["__version__"]
