"""CA3D: convolutional-attentional video recognition with pure-float16 training."""

__version__ = "0.1.0"
