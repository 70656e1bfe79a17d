"""Configuration, data generation and the staged end-to-end run."""

from neural_mcmc.pipeline.config import RunConfig, load_config, parse_config, smoke_config
from neural_mcmc.pipeline.run import STAGES, Pipeline, StageError, run_pipeline

__all__ = ["RunConfig", "load_config", "parse_config", "smoke_config", "STAGES", "Pipeline", "StageError", "run_pipeline"]
