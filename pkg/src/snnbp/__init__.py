"""Sample-wise back-propagation for stochastic neural networks and SDE control.

The forward pass is an Euler-Maruyama discretisation of a controlled SDE;
the backward pass solves the adjoint pair ``(Y, Z)`` along each sampled
trajectory, giving an unbiased gradient sample that drives projected SGD.
"""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    AdjointPath,
    ControlPath,
    DataSample,
    NoisePath,
    StatePath,
    TemporalGrid,
    inner_product,
    l2_norm,
    make_grid,
    make_rng,
    sample_noise,
)
from .optimizer import (  # noqa: E402
    BoxBounds,
    Constant,
    Harmonic,
    SgdConfig,
    TrainingTrace,
    load_control,
    lr,
    project,
    run_sgd,
    run_sgd_repeats,
    save_control,
    sgd_step,
)
from .problems import (  # noqa: E402
    LqParams,
    ProblemSpec,
    SnnArch,
    check_problem_derivatives,
    make_dataset_1d,
    make_dataset_8d,
    make_lq_problem,
    make_snn_problem,
)
from .solver import (  # noqa: E402
    GradientPath,
    adjoint_moments,
    backward_sample,
    batch_gradient,
    estimate_cost,
    estimate_full_gradient,
    finite_difference_gradient,
    sample_gradient,
    simulate_forward,
)
