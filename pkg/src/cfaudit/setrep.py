"""Set-of-patches representation learner with autoencoder regularization,
equivariant attention, and multi-outcome prediction.

A subject is a bag of patches. The encoder maps each patch to a d-dim
feature, an equivariant attention stack weights the patches, the weighted sum
forms the subject representation, and a predictor maps it to the outcome. A
decoder reconstructs patches to keep the latent space information-rich, and a
log-sum term pushes the attention distribution toward sparsity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .classifier import ArgumentError, TrainingError
from .data import PatchBag


def equivariant_layer(h: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row k maps to W (H_k - colmax(H)) + b, with the max taken over rows.

    Output rows permute together with input rows, which is what lets the
    attention weights depend on the whole bag without fixing its order.
    """
    h = np.asarray(h, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if h.ndim != 2 or w.ndim != 2 or w.shape[1] != h.shape[1] or b.shape != (w.shape[0],):
        raise ArgumentError(
            f"shape mismatch: H {h.shape}, W {w.shape}, b {b.shape}"
        )
    return (h - h.max(axis=0, keepdims=True)) @ w.T + b


class _EquivariantLayer(nn.Module):
    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.linear = nn.Linear(d_in, d_out)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.linear(h - h.max(dim=0, keepdim=True).values)


@dataclass
class SetConfig:
    feature_dim: int = 128
    lambda_recon: float = 10.0
    lambda_sparse: float = 1.0
    attention_hidden: int = 32
    encoder_hidden: int = 128
    task: str = "binary"  # or "regression"
    epochs: int = 30
    batch_bags: int = 8
    lr: float = 1e-3
    betas: tuple[float, float] = (0.0, 0.999)
    seed: int = 0
    log_eps: float = 1e-8


class SetModel(nn.Module):
    """Encoder/decoder/attention/predictor over bags of same-shaped patches."""

    def __init__(self, patch_shape: tuple[int, ...], outcome_dim: int, config: SetConfig):
        super().__init__()
        torch.manual_seed(config.seed)
        self.config = config
        self.patch_shape = tuple(patch_shape)
        self.outcome_dim = outcome_dim
        flat = int(np.prod(patch_shape))
        d = config.feature_dim
        self.encoder = nn.Sequential(
            nn.Flatten(),
            nn.Linear(flat, config.encoder_hidden),
            nn.ELU(),
            nn.Linear(config.encoder_hidden, d),
        )
        self.decoder = nn.Sequential(
            nn.Linear(d, config.encoder_hidden),
            nn.ELU(),
            nn.Linear(config.encoder_hidden, flat),
        )
        self.attention = nn.ModuleList(
            [_EquivariantLayer(d, config.attention_hidden),
             _EquivariantLayer(config.attention_hidden, 1)]
        )
        self.predictor = nn.Linear(d, outcome_dim)
        self.trained = False

    def _patches_tensor(self, bag: PatchBag) -> torch.Tensor:
        if tuple(bag.patches.shape[1:]) != self.patch_shape:
            raise ArgumentError(
                f"bag patches {bag.patches.shape[1:]} != model patch shape {self.patch_shape}"
            )
        return torch.as_tensor(bag.patches, dtype=torch.float32)

    def encode(self, patches: torch.Tensor) -> torch.Tensor:
        return self.encoder(patches)

    def attention_logits(self, features: torch.Tensor) -> torch.Tensor:
        h = torch.sigmoid(self.attention[0](features))
        return self.attention[1](h).squeeze(-1)

    def forward_bag(self, patches: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(attention weights, pooled representation, outcome prediction)."""
        feats = self.encode(patches)
        alpha = torch.softmax(self.attention_logits(feats), dim=0)
        pooled = (alpha[:, None] * feats).sum(dim=0)
        pred = self.predictor(pooled)
        return alpha, pooled, pred


def _canonical_order(bag: PatchBag) -> np.ndarray:
    keys = [p.tobytes() for p in bag.patches]
    return np.array(sorted(range(len(keys)), key=keys.__getitem__), dtype=np.int64)


def attention_weights(model: SetModel, bag: PatchBag) -> np.ndarray:
    """Per-patch attention distribution (nonnegative, sums to 1)."""
    with torch.no_grad():
        alpha, _, _ = model.forward_bag(model._patches_tensor(bag))
    return alpha.numpy()


def aggregate(model: SetModel, bag: PatchBag, canonical_order: bool = False) -> np.ndarray:
    """Attention-weighted sum of patch features (the subject representation).

    With canonical_order=True patches are summed in a content-determined
    order, making the result bitwise identical under bag permutations.
    """
    if canonical_order:
        bag = PatchBag(bag.subject_id, bag.patches[_canonical_order(bag)], bag.outcome)
    with torch.no_grad():
        _, pooled, _ = model.forward_bag(model._patches_tensor(bag))
    return pooled.numpy()


def predict_outcome(model: SetModel, bag: PatchBag, canonical_order: bool = False) -> np.ndarray:
    """Outcome prediction for a bag (sigmoid-squashed for binary task)."""
    if canonical_order:
        bag = PatchBag(bag.subject_id, bag.patches[_canonical_order(bag)], bag.outcome)
    with torch.no_grad():
        _, _, pred = model.forward_bag(model._patches_tensor(bag))
        if model.config.task == "binary":
            pred = torch.sigmoid(pred)
    return pred.numpy()


def log_sum_regularizer(alpha: np.ndarray, eps: float = 1e-8) -> float:
    """Sum of log(alpha_j + eps); lower values mean sparser attention."""
    return float(np.log(np.asarray(alpha, dtype=np.float64) + eps).sum())


def loss_tensors(
    model: SetModel, patches: torch.Tensor, y: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Differentiable (total, discriminative, reconstruction, sparsity) terms."""
    cfg = model.config
    feats = model.encode(patches)
    alpha = torch.softmax(model.attention_logits(feats), dim=0)
    pooled = (alpha[:, None] * feats).sum(dim=0)
    pred = model.predictor(pooled)
    if cfg.task == "binary":
        l_d = nn.functional.binary_cross_entropy_with_logits(pred, y)
    else:
        l_d = nn.functional.mse_loss(pred, y)
    recon = model.decoder(feats)
    flat = patches.reshape(patches.shape[0], -1)
    l_g = torch.linalg.vector_norm(flat - recon, dim=1).mean()
    r = torch.log(alpha + cfg.log_eps).sum()
    total = l_d + cfg.lambda_recon * l_g + cfg.lambda_sparse * r
    return total, l_d, l_g, r


def subject2vec_loss(model: SetModel, bag: PatchBag, y: Sequence[float]) -> tuple[float, float, float, float]:
    """(total, L_d, L_g, R) for one bag.

    total = L_d + lambda_recon * L_g + lambda_sparse * R, where L_g is the
    mean l2 reconstruction distance over patches and R the log-sum sparsity
    term over attention weights.
    """
    patches = model._patches_tensor(bag)
    y_t = torch.as_tensor(np.atleast_1d(np.asarray(y, dtype=np.float32)))
    with torch.no_grad():
        parts = loss_tensors(model, patches, y_t)
    vals = tuple(float(p) for p in parts)
    if not all(np.isfinite(v) for v in vals):
        raise TrainingError(f"non-finite loss terms {vals}")
    return vals


def effective_rank(features: np.ndarray) -> float:
    """Entropy-based rank of the singular-value distribution of a feature matrix."""
    sv = np.linalg.svd(np.asarray(features, dtype=np.float64), compute_uv=False)
    total = sv.sum()
    if total <= 0:
        return 0.0
    p = sv / total
    p = p[p > 0]
    return float(np.exp(-(p * np.log(p)).sum()))


def train_setrep(bags: Sequence[PatchBag], config: SetConfig,
                 val_bags: Sequence[PatchBag] | None = None) -> SetModel:
    """Jointly train encoder/decoder/attention/predictor on a set of bags.

    Requires at least two bags with both outcomes represented (binary task).
    The run report records the discriminative metric on validation bags and
    the effective rank of patch features, for the generative-regularizer
    trade-off sweep.
    """
    if len(bags) < 2:
        raise ArgumentError("need at least 2 bags")
    outcomes = np.array([float(b.outcome[0]) for b in bags])
    if config.task == "binary" and len(np.unique(outcomes)) < 2:
        raise ArgumentError("binary task needs both outcomes represented")
    model = SetModel(bags[0].patches.shape[1:], len(bags[0].outcome), config)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=config.betas)
    rng = np.random.default_rng(config.seed)
    curve = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(bags))
        epoch_loss = []
        for start in range(0, len(order), config.batch_bags):
            opt.zero_grad()
            batch = order[start : start + config.batch_bags]
            batch_total = 0.0
            for i in batch:
                bag = bags[int(i)]
                total, _, _, _ = loss_tensors(
                    model,
                    model._patches_tensor(bag),
                    torch.as_tensor(np.asarray(bag.outcome, dtype=np.float32)),
                )
                batch_total = batch_total + total
            batch_total = batch_total / len(batch)
            if not torch.isfinite(batch_total):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            batch_total.backward()
            opt.step()
            epoch_loss.append(float(batch_total))
        curve.append(float(np.mean(epoch_loss)))
    model.eval()
    model.trained = True
    eval_bags = list(val_bags) if val_bags else list(bags)
    with torch.no_grad():
        feats = torch.cat([model.encode(model._patches_tensor(b)) for b in eval_bags])
    report: dict = {"loss_curve": curve, "effective_rank": effective_rank(feats.numpy()),
                    "seed": config.seed}
    if config.task == "binary":
        scores = np.array([float(predict_outcome(model, b)[0]) for b in eval_bags])
        labels = np.array([float(b.outcome[0]) for b in eval_bags])
        from .metrics import rank_auc

        report["val_auc"] = rank_auc(scores[labels == 0], scores[labels == 1])
    else:
        preds = np.stack([predict_outcome(model, b) for b in eval_bags])
        targets = np.stack([b.outcome for b in eval_bags])
        ss_res = float(((preds - targets) ** 2).sum())
        ss_tot = float(((targets - targets.mean(axis=0)) ** 2).sum())
        report["val_r2"] = 1.0 - ss_res / max(ss_tot, 1e-12)
    model.report = report
    return model


def attention_table(model: SetModel, bags: Sequence[PatchBag]) -> list[dict]:
    """Rows of (bag id, patch index, attention weight) for visualization."""
    rows = []
    for bag in bags:
        alpha = attention_weights(model, bag)
        rows.extend(
            {"bag_id": bag.subject_id, "patch_index": j, "alpha": float(a)}
            for j, a in enumerate(alpha)
        )
    return rows
