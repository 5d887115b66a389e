"""Goal-driven grid navigation with attention-selected sub-goals and a
learned imagination network conditioning the policy."""

from .agent import Agent, AgentState, TrajectoryLog, select_subgoal
from .evaluation import EvalReport, evaluate, spl
from .gridhome import (RoomLayout, Pose, Observation, TargetSpec, EpisodeState,
                       generate_layout, make_splits, render_ascii, reset,
                       shortest_path_length, step)
from .imagination import (ImaginationNet, NoiseSchedule, ReplayBuffer,
                          SubgoalRecord, imagine, noise_variance,
                          rnd_imagination, sync_shared, train_imagination)
from .ndgrad import ParamStore, Tape, Tensor, load_checkpoint, save_checkpoint
from .trainer import (EpisodeResult, FlushEvent, SuccessTracker, TrainConfig,
                      actor_critic_losses, compute_returns, run_worker, train)

__version__ = "0.1.0"
