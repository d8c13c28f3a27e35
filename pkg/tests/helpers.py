"""Shared fixtures for the encoder gradient checks."""

import numpy as np

from nlqground.core import FrameGrid
from nlqground.data import Batch
from nlqground.trainer import batch_loss_and_grads


def training_loss_fn(batch, anchor_set, train_config):
    """Wrap the full training objective as a gradcheck-compatible callable."""
    def fn(model):
        breakdown, grads = batch_loss_and_grads(model, batch, anchor_set, train_config, train=False)
        return breakdown.total, grads
    return fn


def tiny_training_batch(T=8, L=4, seed=9):
    """Two items whose ground truths make both anchor scales positive, so
    every head column receives gradient."""
    rng = np.random.default_rng(seed)
    return Batch(
        video=rng.normal(size=(2, T, 5)),
        video_mask=np.ones((2, T), bool),
        text=rng.normal(size=(2, L, 3)),
        text_mask=np.array([[True] * L, [True] * (L - 1) + [False]]),
        gt_index=np.array([[3.0, 5.0], [1.0, 7.0]]),
        grids=[FrameGrid(T, float(T))] * 2,
        query_ids=["a", "b"],
        video_ids=["va", "vb"],
    )
