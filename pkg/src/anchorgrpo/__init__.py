"""Anchored truncated diffusion planning with group-relative policy fine-tuning, at desk scale."""

from .config import Config
from .diffusion import Generator, infer, infer_batch, sample_group
from .evaluation import evaluate, render_scene_svg, run_ablation
from .grpo import group_advantages, intra_anchor_advantage, rl_loss, train_rl, truncate_advantages
from .imitation import build_generator, il_loss, train_il
from .nn import DenseNet, OptimizerState, optimizer_step
from .scene import Scene, check_collision, generate_dataset, generate_scene, pdms_aggregate, score_submetrics
from .selector import SelectorNets, rank_loss, select, train_selector
from .trajectory import AnchorSet, Trajectory, diversity, kmeans_anchors

__version__ = "0.1.0"
