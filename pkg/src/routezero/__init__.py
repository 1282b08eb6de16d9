"""Self-play planning toolkit for TSP and electric-vehicle routing.

Two networks improve each other through paired episodes: a searcher picks
moves with Gumbel-guided tree search while a frozen historical best sets
the bar, and the bar only rises when the current parameters beat it on a
fixed arena.  Exact desk-scale solvers (Held-Karp, branch and bound over
the full battery/time/cargo dynamics) provide ground truth for evaluation.
"""

from .baselines import (
    SearchBudgetError,
    SizeLimitError,
    SolveResult,
    exact_evrp,
    exact_tsp,
    gap,
    greedy_rollout,
    nearest_neighbor,
)
from .env import (
    DeadEndError,
    IllegalActionError,
    PlayerState,
    RouteViolation,
    RoutingGame,
    energy_consumed,
    game_outcome,
    initial_state,
    legal_actions,
    objective,
    rollout,
    step,
    validate_route,
)
from .instance import (
    EvrpInstance,
    Instance,
    InstanceError,
    InstanceFormatError,
    Node,
    NodeKind,
    TspInstance,
    VehicleParams,
    generate_evrp,
    generate_tsp,
    load_instance,
    save_instance,
)
from .net import (
    CheckpointError,
    NetConfig,
    PolicyValueNet,
    featurize,
    greedy_action,
    load_net,
    save_net,
)
from .planner import (
    PlannerConfig,
    PlannerError,
    PlanResult,
    plan,
    sample_gumbel_topm,
    sequential_halving_schedule,
)
from .trainer import (
    EpisodeRecord,
    TrainConfig,
    TrainerError,
    arena_evaluate,
    load_checkpoint,
    run_episode,
    save_checkpoint,
    stage_gate,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "DeadEndError",
    "EpisodeRecord",
    "EvrpInstance",
    "IllegalActionError",
    "Instance",
    "InstanceError",
    "InstanceFormatError",
    "NetConfig",
    "Node",
    "NodeKind",
    "PlannerConfig",
    "PlannerError",
    "PlanResult",
    "PlayerState",
    "PolicyValueNet",
    "RouteViolation",
    "RoutingGame",
    "SearchBudgetError",
    "SizeLimitError",
    "SolveResult",
    "TrainConfig",
    "TrainerError",
    "TspInstance",
    "VehicleParams",
    "arena_evaluate",
    "energy_consumed",
    "exact_evrp",
    "exact_tsp",
    "featurize",
    "game_outcome",
    "gap",
    "generate_evrp",
    "generate_tsp",
    "greedy_action",
    "greedy_rollout",
    "initial_state",
    "legal_actions",
    "load_checkpoint",
    "load_instance",
    "load_net",
    "nearest_neighbor",
    "objective",
    "plan",
    "rollout",
    "run_episode",
    "save_checkpoint",
    "save_instance",
    "save_net",
    "sample_gumbel_topm",
    "sequential_halving_schedule",
    "stage_gate",
    "step",
    "train",
    "validate_route",
]
