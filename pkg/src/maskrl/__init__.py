"""Action-applicability masking for policy-gradient reinforcement learning."""
import os

# Small matrices: a single BLAS thread is faster than the pool overhead.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

__version__ = "0.1.0"
