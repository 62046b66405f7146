"""Configuration, orchestration, persistence and reporting."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import (
    ConfigFileError,
    ExperimentConfig,
    build_encoder,
    default_config,
    read_config,
    write_config,
)
from .heatmap import emit_heatmap, ramp, read_ppm
from .runner import (
    ALPHA_GRID,
    AblationGrid,
    AblationResult,
    ExperimentResult,
    StageError,
    aggregate_rows,
    generate_datasets,
    run_ablation,
    run_experiment,
)
