"""Chain-of-thought distillation data pipeline."""

from ._core import (
    ConfigError,
    ContractError,
    DependencyError,
    EmptyPhaseError,
    EmptySelectionError,
    MockTeacherServer,
    ParseError,
    RewardConfig,
    TransportError,
    ValidationError,
    accuracy_reward,
    build_curriculum,
    clip,
    content_hash,
    format_reward,
    group_advantages,
    length_report,
    parse_record,
    pass_at_k,
    read_records,
    reward_cd,
    reward_rv,
    run_all,
    run_stage,
    serialize_record,
    sha256_hex,
    target_aware_sample,
    task_rebalance,
    total_reward,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
