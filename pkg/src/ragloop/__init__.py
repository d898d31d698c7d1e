"""Multi-turn search agent loop with de-duplication and memory-cache contextualization."""

__version__ = "0.1.0"

from .orchestrator import EpisodeConfig, PipelineMode, run_episode  # noqa: E402

__all__ = ["EpisodeConfig", "PipelineMode", "run_episode", "__version__"]
