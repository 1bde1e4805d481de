"""Meta-learned PID gains with RL-based online adaptation."""

from ._metapid import (
    ConfigError,
    ContractError,
    DataError,
    Dataset,
    IoError,
    MetaNetwork,
    NumericError,
    ParseError,
    Policy,
    ShapeError,
    VersionError,
    augment,
    cli,
    evaluate,
    evaluate_gains,
    features,
    init_metanet,
    load_dataset,
    load_metanet,
    load_policy,
    mae,
    max_error,
    optimize_gains,
    per_joint_mae,
    preset_names,
    rmse,
    robot,
    std_dev,
    train_meta,
    train_rl,
)

__all__ = [name for name in dir() if not name.startswith("_")]
