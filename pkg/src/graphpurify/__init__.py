"""Adversarial purification of graph structure with masked discrete diffusion."""
from .graphcore import Graph, SbmConfig, generate_sbm, split_dataset
from .purifier import PurifyConfig, evaluate_purification, purify

__all__ = ["Graph", "SbmConfig", "generate_sbm", "split_dataset", "PurifyConfig",
           "evaluate_purification", "purify"]
__version__ = "0.1.0"
