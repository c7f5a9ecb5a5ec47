"""Contrastive pretraining of cine-video and report encoders on synthetic studies,
with multi-instance finetuning heads and evaluation statistics."""

__version__ = "0.1.0"

__all__ = ["attnmaps", "cli", "contrastive", "diffcore", "encoders", "evalstats", "milhead", "synthdata",
           "training"]
