"""Loss-driven dynamic branch regularization for small residual and dense networks."""

from .autodiff import Graph, Parameter, backward, grad_check, surrogate_check
from .controller import (
    ControllerState,
    ScheduleSpec,
    controller_step,
    filtered_loss,
    gaussian_window,
    replay_trace,
    schedule_value,
)
from .data import BatchIterator, Dataset, gen_synthetic, load_idx
from .errors import ConfigError, IdxFormatError, NumericError, ShapeError
from .harness import RunConfig, cosine_lr, evaluate, run_experiment, sgd_step, sweep_schedules
from .nets import Net, NetSpec, build_net, count_params, set_mode
from .perturb import PerturbUnit, noise_range, shake_shake_scales, shakedrop_keep_prob, shakedrop_scale

__version__ = "0.1.0"
