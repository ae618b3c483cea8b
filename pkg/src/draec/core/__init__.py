"""Per-(microphone, bin) adaptive filter kernels."""
from .bank import BACKEND, BankResult, BankState, TapLayout, apply_trace, build_regressors, run_bank
from .reference import (
    FilterError,
    FilterState,
    StepOutput,
    build_regressor,
    estimate_process_noise,
    estimate_psd,
    init_state,
    kalman_step,
    rls_step,
)
