"""Two-branch sprite-video diffusion: appearance from captioned stills, motion
from caption-free videos, joint training with a temporal coherence penalty,
and an analytic evaluation battery on a synthetic corpus."""

__version__ = "0.1.0"
