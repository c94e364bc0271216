from .expfam import ConjugateParams, FamilyKind, family
from .flows import FlowDensity, FlowSpec
from .model import BudgetMode, NatPnConfig, NatPnModel, PosteriorPrediction, bayesian_loss, ensemble_combine, uncertainties
from .training import TrainConfig, TrainEvent, fit, grid_search
from .util import NatPnError
