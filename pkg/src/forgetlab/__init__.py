"""Desk-scale harness for measuring forgetting and forward transfer in continual learning."""

from .autograd import Tensor, backward, grad_check, no_grad
from .experiment import ExperimentConfig, load_config, parse_config, run_one, run_sweep
from .learners import LearnerConfig, agem_project, run_continual
from .metrics import AccuracyMatrix, avg_forgetting, feature_diversity, kshot_probe_fwt
from .nn import SGDConfig, cosine_lr, init_model
from .tasks import gen_drifting_benchmark, gen_split_benchmark, sample_kshot

__version__ = "0.1.0"
