from .hopper import HopperParams, HOPPER_TRIALS, hopper_initial_guess, hopper_system, hopper_task, hopper_weights
from .quadruped import QuadrupedParams, quadruped_initial_guess, quadruped_system, quadruped_task
from .task import TaskSpec

__all__ = [
    "HopperParams", "QuadrupedParams", "HOPPER_TRIALS", "TaskSpec",
    "hopper_initial_guess", "hopper_system", "hopper_task", "hopper_weights",
    "quadruped_initial_guess", "quadruped_system", "quadruped_task",
]
