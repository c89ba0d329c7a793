from .data import PrefixDataset
from .encoder import CausalEncoder
from .heads import MlpHead, QHead, VHead, sigmoid
from .losses import (
    grad_bce,
    grad_distill,
    grad_weighted_sq,
    loss_bce,
    loss_distill,
    loss_reg,
    loss_weighted_sq,
)
from .reward import (
    BOS,
    QRewardModel,
    VRewardModel,
    assemble_q_reward_matrix,
    context_matrix,
    q_score_all,
    v_score,
)
from .training import (
    OptimizerState,
    TrainConfig,
    TrainingDiverged,
    TrainResult,
    batch_objective,
    dataset_mse,
    distill_dataset,
    teacher_targets,
    train,
)
from .checkpoint import load_checkpoint, parameter_digest, read_header, save_checkpoint
from .expressivity import (
    ExpressivityConfig,
    ExpressivityResult,
    expressivity_experiment,
    fit_triangular,
    rank_floor,
    train_triangular,
    triangular_dataset,
)
