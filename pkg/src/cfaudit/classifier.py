"""The black-box classifier f: training, inference, gradients, and the
Phi1/Phi2 decomposition at a named tap layer.

Architectures are pluggable descriptors (small MLPs and CNNs at desk scale).
``f = phi2 . phi1`` holds exactly at every supported tap: ``phi1`` returns the
raw activation tensor at the tap stage and ``phi2`` consumes it. Unit-level
interventions operate on a vectorized view of that activation (identity for
vector-valued taps, flatten for spatial ones).
"""

from __future__ import annotations

import copy
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .data import Dataset

CHECKPOINT_FORMAT = "cfaudit-classifier/1"


class TrainingError(RuntimeError):
    """Raised when optimization diverges (NaN/inf loss)."""


class ArgumentError(ValueError):
    """Raised on shape/index mismatches in inference-time calls."""


@dataclass(frozen=True)
class SoftLabeledBatch:
    """Images plus probability-vector targets (soft labels)."""

    images: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.targets, dtype=np.float64)
        if t.ndim != 2:
            raise ArgumentError("targets must be a (batch, classes) matrix")
        sums = t.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            raise ArgumentError("each soft target must sum to 1 within 1e-6")
        object.__setattr__(self, "targets", t)
        object.__setattr__(self, "images", np.asarray(self.images, dtype=np.float64))


@dataclass
class TrainingConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-4
    seed: int = 0
    val_fraction: float = 0.15
    weight_decay: float = 0.0


def _mlp_stages(in_dim: int, hidden: Sequence[int]) -> "dict[str, nn.Module]":
    stages: dict[str, nn.Module] = {}
    prev = in_dim
    for i, width in enumerate(hidden, start=1):
        stages[f"h{i}"] = nn.Sequential(nn.Linear(prev, width), nn.ReLU())
        prev = width
    return stages


def _conv_block(cin: int, cout: int) -> nn.Module:
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel_size=3, padding=1),
        nn.ReLU(),
        nn.MaxPool2d(2),
    )


class _Net(nn.Module):
    """Backbone with named stages followed by a dense head producing logits."""

    def __init__(self, arch: dict):
        super().__init__()
        self.arch = arch
        kind = arch["kind"]
        if kind == "mlp":
            self.input_kind = "vector"
            stages = _mlp_stages(arch["in_dim"], arch["hidden"])
            head_in = arch["hidden"][-1]
        elif kind == "cnn":
            self.input_kind = "image"
            cin, h, w = arch["in_shape"]
            stages = {}
            for i, cout in enumerate(arch["channels"], start=1):
                stages[f"b{i}"] = _conv_block(cin, cout)
                cin, h, w = cout, h // 2, w // 2
            pool = arch.get("pool", "max")
            if pool == "max":
                stages["pool"] = nn.Sequential(nn.AdaptiveMaxPool2d(1), nn.Flatten())
                head_in = cin
            elif pool == "flatten":
                stages["pool"] = nn.Flatten()
                head_in = cin * h * w
            else:
                raise ArgumentError(f"unknown pool mode {pool!r}")
            for j, width in enumerate(arch.get("head_hidden", []), start=1):
                stages[f"h{j}"] = nn.Sequential(nn.Linear(head_in, width), nn.ReLU())
                head_in = width
        else:
            raise ArgumentError(f"unknown architecture kind {kind!r}")
        self.stage_names = list(stages)
        self.stages = nn.ModuleDict(stages)
        self.head = nn.Linear(head_in, arch["classes"])

    def forward_from(self, x: torch.Tensor, start: int) -> torch.Tensor:
        for name in self.stage_names[start:]:
            x = self.stages[name](x)
        return self.head(x)

    def forward_until(self, x: torch.Tensor, stop: int) -> torch.Tensor:
        for name in self.stage_names[:stop]:
            x = self.stages[name](x)
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_from(x, 0)


class ClassifierModel:
    """Trained classifier with an explicit tap-layer decomposition.

    Immutable once trained: all inference methods are read-only and safe for
    concurrent use. ``tap_layer`` names the stage whose output is phi1.
    """

    def __init__(self, arch: dict, tap_layer: str | None = None, seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        torch.manual_seed(seed)
        self.net = _Net(arch).to(dtype)
        self.arch = arch
        self.seed = seed
        self.dtype = dtype
        self.class_count = arch["classes"]
        names = self.net.stage_names
        if tap_layer is None:
            tap_layer = "pool" if "pool" in names else names[-1]
        self.tap_layer = tap_layer
        if self.tap_layer not in names:
            raise ArgumentError(f"tap layer {self.tap_layer!r} not in {names}")
        self._tap_index = names.index(self.tap_layer) + 1
        self.report: dict = {}

    # --- tensor plumbing ---------------------------------------------------

    def _to_tensor(self, images: np.ndarray) -> tuple[torch.Tensor, bool]:
        """Convert channel-last numpy input to a batched torch tensor."""
        x = np.asarray(images, dtype=np.float64)
        if self.net.input_kind == "vector":
            single = x.ndim == 1
            if single:
                x = x[None]
            if x.shape[-1] != self.arch["in_dim"]:
                raise ArgumentError(f"expected {self.arch['in_dim']}-dim input, got {x.shape}")
        else:
            cin, h, w = self.arch["in_shape"]
            single = x.ndim == 3
            if single:
                x = x[None]
            if x.shape[1:] != (h, w, cin):
                raise ArgumentError(f"expected image shape {(h, w, cin)}, got {x.shape[1:]}")
            x = np.moveaxis(x, -1, 1)
        return torch.as_tensor(x, dtype=self.dtype), single

    def _from_tensor(self, t: torch.Tensor, single: bool) -> np.ndarray:
        out = t.detach().cpu().numpy()
        return out[0] if single else out

    # --- inference -----------------------------------------------------------

    def logits(self, images: np.ndarray) -> np.ndarray:
        x, single = self._to_tensor(images)
        with torch.no_grad():
            return self._from_tensor(self.net(x), single)

    def predict(self, images: np.ndarray) -> np.ndarray:
        """Class posterior(s); rows sum to 1."""
        x, single = self._to_tensor(images)
        with torch.no_grad():
            p = torch.softmax(self.net(x), dim=1)
        return self._from_tensor(p, single)

    def phi1(self, images: np.ndarray) -> np.ndarray:
        """Raw activation tensor at the tap layer."""
        x, single = self._to_tensor(images)
        with torch.no_grad():
            t = self.net.forward_until(x, self._tap_index)
        return self._from_tensor(t, single)

    def phi2(self, activations: np.ndarray) -> np.ndarray:
        """Posterior from a tap-layer activation (phi2(phi1(x)) == predict(x))."""
        a = np.asarray(activations, dtype=np.float64)
        raw_ndim = self._raw_phi1_ndim()
        single = a.ndim == raw_ndim
        if single:
            a = a[None]
        t = torch.as_tensor(a, dtype=self.dtype)
        with torch.no_grad():
            p = torch.softmax(self.net.forward_from(t, self._tap_index), dim=1)
        return self._from_tensor(p, single)

    def tap(self, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(vectorized phi1 activations, posterior) in one pass."""
        x, single = self._to_tensor(images)
        with torch.no_grad():
            t = self.net.forward_until(x, self._tap_index)
            p = torch.softmax(self.net.forward_from(t, self._tap_index), dim=1)
        return self._from_tensor(t.flatten(1), single), self._from_tensor(p, single)

    def _raw_phi1_ndim(self) -> int:
        if self.net.input_kind == "vector":
            return 1
        # conv blocks yield (C,H,W); pool and dense stages yield vectors
        return 3 if self.tap_layer.startswith("b") else 1

    def phi1_dim(self) -> int:
        """Length of the vectorized (flattened) phi1 representation."""
        probe = np.zeros(self._input_shape())
        return int(np.prod(self.phi1(probe).shape))

    def _input_shape(self) -> tuple[int, ...]:
        if self.net.input_kind == "vector":
            return (self.arch["in_dim"],)
        cin, h, w = self.arch["in_shape"]
        return (h, w, cin)

    def predictive_entropy(self, images: np.ndarray) -> float | np.ndarray:
        """Shannon entropy (nats) of the posterior; in [0, ln K]."""
        p = np.clip(self.predict(images), 1e-12, 1.0)
        return -(p * np.log(p)).sum(axis=-1)

    def intervene_forward(
        self, images: np.ndarray, unit_set: Sequence[int], values: np.ndarray
    ) -> np.ndarray:
        """Posterior after do-intervention on vectorized phi1 units.

        Computes phi1, overwrites the listed units with ``values`` (same
        leading batch shape), and applies phi2. An empty unit set is a no-op.
        """
        units = np.asarray(unit_set, dtype=np.int64)
        act = self.phi1(images)
        single = act.ndim == self._raw_phi1_ndim()
        batch = act[None] if single else act
        flat = batch.reshape(batch.shape[0], -1).copy()
        if units.size:
            if units.min() < 0 or units.max() >= flat.shape[1]:
                raise ArgumentError(
                    f"unit indices must be in 0..{flat.shape[1] - 1}"
                )
            vals = np.asarray(values, dtype=np.float64)
            if single and vals.ndim == 1:
                vals = vals[None]
            flat[:, units] = vals
        out = self.phi2(flat.reshape(batch.shape))
        return out[0] if single else out

    # --- persistence ---------------------------------------------------------

    def state_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k, v in sorted(self.net.state_dict().items()):
            h.update(k.encode())
            h.update(v.numpy().tobytes())
        return h.hexdigest()

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "architecture.json", "w") as fh:
            json.dump(
                {"format": CHECKPOINT_FORMAT, "arch": self.arch,
                 "tap_layer": self.tap_layer, "seed": self.seed},
                fh, indent=2)
        torch.save(self.net.state_dict(), directory / "params.pt")
        with open(directory / "report.json", "w") as fh:
            json.dump(self.report, fh, indent=2)
        return directory

    @classmethod
    def load(cls, directory: str | Path) -> "ClassifierModel":
        directory = Path(directory)
        with open(directory / "architecture.json") as fh:
            meta = json.load(fh)
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ArgumentError(f"unsupported checkpoint format {meta.get('format')!r}")
        model = cls(meta["arch"], tap_layer=meta["tap_layer"], seed=meta["seed"])
        model.net.load_state_dict(torch.load(directory / "params.pt", weights_only=True))
        report_path = directory / "report.json"
        if report_path.exists():
            model.report = json.loads(report_path.read_text())
        return model

    def clone(self) -> "ClassifierModel":
        dup = ClassifierModel(self.arch, tap_layer=self.tap_layer, seed=self.seed,
                              dtype=self.dtype)
        dup.net.load_state_dict(copy.deepcopy(self.net.state_dict()))
        dup.report = dict(self.report)
        return dup


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train_classifier(data: Dataset, config: TrainingConfig, arch: dict | None = None,
                     tap_layer: str | None = None) -> ClassifierModel:
    """Cross-entropy training; returns a model carrying a run report.

    The seed pins initialization and data order, so repeated runs produce
    identical parameters and losses. Divergence (NaN/inf) raises
    TrainingError with the offending epoch/step.
    """
    labels = data.labels()
    if len(np.unique(labels)) < 2:
        raise ArgumentError("training data must contain at least 2 classes")
    if arch is None:
        arch = default_arch_for(data)
    model = ClassifierModel(arch, tap_layer=tap_layer, seed=config.seed)

    from .data import DataError

    try:
        train_ds = data.filter_split("train")
        val_ds = data.filter_split("val")
    except DataError:
        rng = np.random.default_rng(config.seed)
        order = rng.permutation(len(data))
        n_val = max(1, int(config.val_fraction * len(data)))
        val_ds = data.subset(order[:n_val])
        train_ds = data.subset(order[n_val:])

    x_train, _ = model._to_tensor(train_ds.images())
    y_train = torch.as_tensor(train_ds.labels())
    opt = torch.optim.Adam(model.net.parameters(), lr=config.lr,
                           weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    loss_curve = []
    final_loss = float("nan")
    for epoch in range(config.epochs):
        model.net.train()
        epoch_losses = []
        for step, idx in enumerate(_batches(len(train_ds), config.batch_size, rng)):
            sel = torch.as_tensor(idx)
            logits = model.net(x_train[sel])
            loss = nn.functional.cross_entropy(logits, y_train[sel])
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} step {step} (lr={config.lr})"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss))
        final_loss = float(np.mean(epoch_losses))
        loss_curve.append(final_loss)
    model.net.eval()
    model.report = {
        "final_loss": final_loss,
        "loss_curve": loss_curve,
        "train_accuracy": accuracy(model, train_ds),
        "val_accuracy": accuracy(model, val_ds),
        "epochs": config.epochs,
        "seed": config.seed,
    }
    return model


def accuracy(model: ClassifierModel, data: Dataset) -> float:
    preds = model.predict(data.images()).argmax(axis=1)
    return float((preds == data.labels()).mean())


def finetune(
    model: ClassifierModel,
    batches: Iterable[SoftLabeledBatch],
    config: TrainingConfig,
) -> ClassifierModel:
    """Fine-tune on soft-labeled batches; returns a new model, same architecture.

    Loss is soft-target cross-entropy -sum(target * log softmax); with hard
    one-hot targets this reduces to standard cross-entropy. The input stream
    is replayed for config.epochs passes.
    """
    batch_list = list(batches)
    if not batch_list:
        raise ArgumentError("no batches supplied")
    new = model.clone()
    torch.manual_seed(config.seed)
    opt = torch.optim.Adam(new.net.parameters(), lr=config.lr,
                           weight_decay=config.weight_decay)
    new.net.train()
    for epoch in range(config.epochs):
        for step, batch in enumerate(batch_list):
            x, _ = new._to_tensor(batch.images)
            t = torch.as_tensor(batch.targets, dtype=new.dtype)
            logp = torch.log_softmax(new.net(x), dim=1)
            loss = -(t * logp).sum(dim=1).mean()
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch} step {step}")
            opt.zero_grad()
            loss.backward()
            if config.lr > 0:
                opt.step()
    new.net.eval()
    new.report = dict(model.report, finetuned=True, finetune_epochs=config.epochs)
    return new


def default_arch_for(data: Dataset) -> dict:
    """A small MLP for vector data, a small CNN for image data."""
    shape = data.image_shape
    if len(shape) == 1:
        return {"kind": "mlp", "in_dim": shape[0], "hidden": [64, 64],
                "classes": data.class_count}
    h, w, c = shape
    return {"kind": "cnn", "in_shape": [c, h, w], "channels": [16, 32],
            "classes": data.class_count, "pool": "max", "head_hidden": [32]}
