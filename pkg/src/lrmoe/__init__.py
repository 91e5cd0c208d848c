"""Language-routed mixture-of-experts CTC encoders on numpy."""

from .models import ModelConfig, build, count_flops, count_params, forward, load_checkpoint, save_checkpoint

__all__ = ["ModelConfig", "build", "count_flops", "count_params", "forward", "load_checkpoint", "save_checkpoint"]
__version__ = "0.1.0"
