"""LoRA-adapted deep unfolding networks: one frozen denoiser backbone, per-stage low-rank adapters."""
__version__ = "0.1.0"
