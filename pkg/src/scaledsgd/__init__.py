"""Matrix-completion optimization with plain and preconditioned SGD.

The preconditioned iteration right-scales each stochastic row update by a
cached r-by-r Gram inverse maintained through rank-1 updates, which keeps
convergence independent of how ill-conditioned the ground truth is while
preserving the O(r^2) per-step cost and lock-free parallelism of SGD.
"""

from .datagen import add_noise, gen_edm, gen_low_rank, gen_low_rank_factor, noise_floor, one_bit_targets
from .engine import Dataset, NonFiniteError, RunConfig, run, sample_uniform, training_loss
from .evaluate import Trace, TraceRow, auc, bpr_eval, np_maximum, read_trace_csv, write_trace_csv
from .kernel import NotPositiveDefinite, SingularDowndate, gram, smw_add, smw_sub, sym_inverse
from .losses import (
    DegenerateSample,
    ElementSample,
    StepMode,
    TripleSample,
    bpr_step,
    edm_step,
    np_step,
    rmse_step,
    sigmoid,
    xent_step,
)
from .model import (
    FactorModel,
    RankDeficient,
    TheoryRegion,
    check_coherence_descent,
    check_function_descent,
    coherence_g,
    coherence_h,
    condition_number_psd,
    full_grad,
    full_loss,
    grad_g,
    init_gaussian,
    local_dual_norm,
    local_norm,
    mu_coherence,
    refresh_preconditioner,
    sg,
)
from .parallel import ParallelConfig, precond_divergence, run_parallel

__version__ = "0.1.0"
