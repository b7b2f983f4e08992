"""Hidden Markov nonlinear ICA."""
from .datagen import DataConfig, DatasetBundle, generate_dataset, make_circular_transition
from .demix_net import DemixNet, init_network
from .em_trainer import TrainConfig, e_step, free_energy, train, train_full, train_stochastic
from .emission import GaussianStateParams, log_emission_matrix
from .evaluation import check_assumptions, hungarian, mcc, state_accuracy
from .hmm_core import PosteriorSet, forward_backward, stationary_distribution, viterbi
from .model import ModelParams

__version__ = "0.1.0"
