"""Parameter-space skill composition for diffusion policies.

Submodules: numcore (MLP, gradients, Adam, RNG), diffusion (noise predictor
and sampler), lora (low-rank adapters), critics (expectile value learning),
compose (composition modes and the composer network), skills (on-disk skill
library), envs (point-mass tasks and datasets) and harness (pipelines, CLI).
"""

__version__ = "0.1.0"
