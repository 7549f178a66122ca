"""EdgeNet: learned co-instance classification of cluster-graph edges."""

from panograph.edgenet.checkpoint import load_checkpoint, save_checkpoint
from panograph.edgenet.model import (
    PARAM_SHAPES,
    EdgeNetInput,
    EdgeNetParams,
    cluster_avg_pool,
    edge_mlp_forward,
    embed_clusters,
    forward,
    forward_prepared,
    init_params,
    loss_and_grad,
    loss_and_grad_prepared,
    prepare_input,
    sage_conv_forward,
)
from panograph.edgenet.optim import TrainConfig, TrainSample, TrainState, sgd_step, train
from panograph.edgenet.sparse import SparseVoxelTensor, sparse_conv_forward, voxelize

__all__ = [
    "PARAM_SHAPES",
    "EdgeNetInput",
    "EdgeNetParams",
    "SparseVoxelTensor",
    "TrainConfig",
    "TrainSample",
    "TrainState",
    "cluster_avg_pool",
    "edge_mlp_forward",
    "embed_clusters",
    "forward",
    "forward_prepared",
    "init_params",
    "load_checkpoint",
    "loss_and_grad",
    "loss_and_grad_prepared",
    "prepare_input",
    "sage_conv_forward",
    "save_checkpoint",
    "sgd_step",
    "sparse_conv_forward",
    "train",
    "voxelize",
]
