"""Self-supervised pretraining on ToF depth maps via superpixel cluster
distance prediction, plus the semi-supervised evaluation harness around it."""

__version__ = "0.1.0"
