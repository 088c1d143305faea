"""Resolution-asymmetric metric learning: a small numpy autodiff stack, a conv embedding
network, teacher training, student distillation and retrieval evaluation."""

__version__ = "0.1.0"
