"""DHNet: Volterra blocks and degradation-aware expert routing for image deblurring."""
from .ddre import DDRE
from .errors import CheckpointError, ConfigError, NumericError
from .losses import LossWeights, total_loss
from .metrics import psnr, ssim
from .network import DHNet, NetworkConfig, count_params_macs
from .volterra import VBlock, VolterraSecondOrder

__version__ = "0.1.0"
