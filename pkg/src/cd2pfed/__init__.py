"""Channel-decoupled personalized federated learning with cyclic distillation."""
from .config import FederationConfig
from .data import Dataset, FederatedData, HeterogeneityConfig, federate, synth_generate
from .decouple import PartitionPlan, make_plan, masks_for, schedule_p
from .exceptions import CD2Error, ConfigurationError, DataLoadError, ProtocolError, TrainingError
from .nn import Architecture, LayerSpec, ModelParams, lenet5, mlp
from .server import aggregate, run_experiment
from .strategies import Strategy

__version__ = "0.1.0"
