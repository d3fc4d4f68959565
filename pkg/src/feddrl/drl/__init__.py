from feddrl.drl.agent import (
    AgentConfig,
    AggAction,
    AggState,
    DrlAgent,
    ReplayBuffer,
    StateNormalizer,
    action_from_head,
    action_head_backward,
    build_state,
    compute_reward,
    ddpg_update,
    impacts_from_action,
    policy_objective_grad,
    q_value,
    select_action,
    soft_update,
    softplus,
    td_priority,
    value_loss_grad,
    value_targets,
)
from feddrl.drl.training import FedDrlAggregator, noise_schedule, two_stage_train

__all__ = [
    "AgentConfig",
    "AggAction",
    "AggState",
    "DrlAgent",
    "FedDrlAggregator",
    "ReplayBuffer",
    "StateNormalizer",
    "action_from_head",
    "action_head_backward",
    "build_state",
    "compute_reward",
    "ddpg_update",
    "impacts_from_action",
    "noise_schedule",
    "policy_objective_grad",
    "q_value",
    "select_action",
    "soft_update",
    "softplus",
    "td_priority",
    "two_stage_train",
    "value_loss_grad",
    "value_targets",
]
