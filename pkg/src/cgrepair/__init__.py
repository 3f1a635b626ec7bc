"""Counterexample-guided repair of unsafe policies for deterministic CMDPs.

A policy is repaired by alternating counterexample search (a sound sampling
falsifier plus exhaustive grid verification over the initial box) with a
removal loop that jointly retrains a learned safety critic and pushes the
policy, via an l1 penalty method, to maximise return subject to the critic
clearing a safety margin at every retained counterexample.
"""

from .cmdp import (
    Environment,
    HorizonConfig,
    SimulationDiverged,
    Trajectory,
    is_safe,
    return_of,
    safety_value,
    simulate,
)
from .critic import (
    CriticDataset,
    CriticRepairOutcome,
    CriticSample,
    NotACounterexample,
    StaleDataset,
    collect_dataset,
    critic_loss,
    repair_critic,
    repair_critic_for_policy,
    suffix_minimum,
)
from .envs import ENVIRONMENTS, EnvSpec, make_env, make_pointmass, make_thermostat
from .nets import (
    Affine,
    BoxSquash,
    CheckpointError,
    GradientReport,
    HorizonTooLong,
    Network,
    bptt_return_grad,
    checkpoint_roundtrip,
    forward,
    grad_output_wrt_input,
    grad_output_wrt_params,
    init_network,
    load_checkpoint,
    network_fingerprint,
    save_checkpoint,
    with_params,
    zero_network,
)
from .repair import (
    BaselineResult,
    BaselineTrainingFailed,
    InnerLoopResult,
    PenaltyConfig,
    PolicyUpdateResult,
    RepairReport,
    RepairSettings,
    SolverDiverged,
    StaleCritic,
    critic_for_env,
    evaluate_policy,
    policy_for_env,
    remove_counterexamples,
    repair,
    solve_l1_penalty,
    train_unsafe_baseline,
    update_policy,
)
from .search import (
    SAFE_ON_GRID,
    UNSAFE,
    CounterexampleEntry,
    CounterexampleSet,
    GridCapExceeded,
    SearchConfig,
    VerificationOutcome,
    confirm,
    falsify,
    verify_grid,
)

__all__ = [name for name in dir() if not name.startswith("_")]
