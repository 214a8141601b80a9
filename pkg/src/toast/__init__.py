"""Fast smooth sampling-based planning with a learned model and an LQR tracker.

The package splits into five modules:

* :mod:`toast.nn_dynamics`   learned discrete-time dynamics, analytic Jacobians,
                             training, and the ``.toastnn`` model file format.
* :mod:`toast.smppi`         the smooth sampling planner over action derivatives
                             plus the plain action-space variant.
* :mod:`toast.tvlqr`         time-varying LQR synthesis along a plan from the
                             same model's Jacobians.
* :mod:`toast.environments`  simulated benchmarks, disturbances, data collection.
* :mod:`toast.harness`       configs, the two-rate control loop, metrics, reports.
"""

from .environments import (
    BicycleSpec,
    CartpoleSpec,
    Disturbance,
    EpisodeLog,
    FigureEightTask,
    PendulumSpec,
    collect_dataset,
    make_spec,
    step,
    wrap_angle,
)
from .harness import (
    CompareReport,
    ConfigError,
    ExperimentConfig,
    MetricsReport,
    PipelineError,
    compare,
    load_config,
    pipeline,
    run_episode,
)
from .nn_dynamics import (
    DimensionError,
    DynamicsModel,
    HistoryWindow,
    ModelFormatError,
    TrainConfig,
    TrainReport,
    augmented_jacobian,
    forward,
    jacobians,
    load,
    save,
    train,
)
from .smppi import (
    DirectPlan,
    LiftedPlan,
    MppiConfig,
    PlannerDivergence,
    integrate_actions,
    plan,
    plan_direct,
    rollout,
    shift,
    shift_direct,
    weighted_update,
)
from .tvlqr import (
    GainSchedule,
    LinearizationSeq,
    RiccatiError,
    TrackingCost,
    feedback_action,
    interpolate_gain,
    linearize_along,
    riccati_backward,
)

__version__ = "0.1.0"

__all__ = [
    "BicycleSpec",
    "CartpoleSpec",
    "CompareReport",
    "ConfigError",
    "DimensionError",
    "DirectPlan",
    "Disturbance",
    "DynamicsModel",
    "EpisodeLog",
    "ExperimentConfig",
    "FigureEightTask",
    "GainSchedule",
    "HistoryWindow",
    "LiftedPlan",
    "LinearizationSeq",
    "MetricsReport",
    "ModelFormatError",
    "MppiConfig",
    "PendulumSpec",
    "PipelineError",
    "PlannerDivergence",
    "RiccatiError",
    "TrackingCost",
    "TrainConfig",
    "TrainReport",
    "augmented_jacobian",
    "collect_dataset",
    "compare",
    "feedback_action",
    "forward",
    "integrate_actions",
    "interpolate_gain",
    "jacobians",
    "linearize_along",
    "load",
    "load_config",
    "make_spec",
    "pipeline",
    "plan",
    "plan_direct",
    "riccati_backward",
    "rollout",
    "run_episode",
    "save",
    "shift",
    "shift_direct",
    "step",
    "train",
    "weighted_update",
    "wrap_angle",
]
