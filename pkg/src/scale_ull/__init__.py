"""Online self-supervised lifelong learning with pseudo-supervised contrastive
learning, similarity distillation and uniform-subset replay memory."""

__version__ = "0.1.0"
