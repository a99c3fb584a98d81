__version__ = '0.1.0'

from .config import load_config
from .data import LorenzConfig, TrialBatch, load_dataset, make_dataset, save_dataset
from .errors import LangevinFlowError
from .langevin import LangevinParams, LangevinState
from .model import LangevinFlow, ModelConfig, predict_rates
from .potential import OscillatorPotential
from .train import TrainConfig, fit, load_checkpoint, save_checkpoint

__all__ = ['load_config', 'LorenzConfig', 'TrialBatch', 'load_dataset', 'make_dataset', 'save_dataset',
           'LangevinFlowError', 'LangevinParams', 'LangevinState', 'LangevinFlow', 'ModelConfig',
           'predict_rates', 'OscillatorPotential', 'TrainConfig', 'fit', 'load_checkpoint', 'save_checkpoint']

# Figures need a working matplotlib backend (optional)
try:
    from .plotting import plot_latent_waves, plot_rates
    __all__ += ['plot_latent_waves', 'plot_rates']
except ImportError as e:
    import warnings
    warnings.warn(f"Plotting not available: {e}", UserWarning)
