"""Full parameter set of the hidden Markov nonlinear ICA model."""
from dataclasses import dataclass

import numpy as np

from .demix_net import DemixNet
from .emission import GaussianStateParams, gaussian_to_natural
from .hmm_core import stationary_distribution, validate_transition


@dataclass
class ModelParams:
    """Transition matrix, per-state Gaussian source parameters and demixing network.

    The initial-state distribution is not a free parameter: it is always the
    stationary distribution of ``A``. ``net`` may be None for generator ground
    truth whose inverse mixing is not representable as a DemixNet.
    """

    A: np.ndarray
    sources: GaussianStateParams
    net: DemixNet

    def __post_init__(self):
        self.A = validate_transition(self.A, atol=1e-9)
        if self.A.shape[0] != self.sources.C:
            raise ValueError("transition matrix and source params disagree on C")
        if self.net is not None and self.sources.N != self.net.N:
            raise ValueError("source params and network disagree on N")

    @property
    def C(self):
        return self.A.shape[0]

    @property
    def N(self):
        return self.sources.N

    @property
    def pi(self):
        if self.C == 1:
            return np.ones(1)
        return stationary_distribution(self.A)

    @property
    def natural(self):
        return gaussian_to_natural(self.sources)

    def copy(self):
        return ModelParams(self.A.copy(), self.sources.copy(), self.net.copy() if self.net is not None else None)
