"""Desk-scale graph encoder: node and edge encoders, edge-conditioned GATv2 and InfoNCE training."""

from .features import spatial_pe
from .instructions import InstructionTemplate, template
from .loss import infonce, infonce_loss
from .model import (
    EncoderConfig,
    EncoderParams,
    encode_edges,
    encode_nodes,
    gatv2_layer,
    graph_embedding,
    text_embedding,
)
from .train import ContrastiveBatch, GradCheckReport, TrainConfig, grad_check, train_toy

__all__ = [
    "ContrastiveBatch",
    "EncoderConfig",
    "EncoderParams",
    "GradCheckReport",
    "InstructionTemplate",
    "TrainConfig",
    "encode_edges",
    "encode_nodes",
    "gatv2_layer",
    "grad_check",
    "graph_embedding",
    "infonce",
    "infonce_loss",
    "spatial_pe",
    "template",
    "text_embedding",
    "train_toy",
]
