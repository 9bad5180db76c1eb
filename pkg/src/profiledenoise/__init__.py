"""Post-training denoising of user profiles for a MultiVAE recommender, with LLM and baseline denoisers."""

__version__ = "0.1.0"
