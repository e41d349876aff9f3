"""Few-shot fine-grained action recognition with bidirectional attention and
contrastive meta-learning, on synthetic spatio-temporal clips."""

__version__ = "0.1.0"
