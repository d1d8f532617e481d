"""Device-aware feature alignment and ensemble knowledge distillation on a numpy autodiff core."""

__version__ = "0.1.0"
