"""Optimization loop, checkpoints and single-subject inference."""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import time
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .errors import (
    ConfigError,
    CorruptFile,
    EmptyDataset,
    NonFiniteLoss,
    NotNormalized,
    SpecHashMismatch,
)
from .losses import LossConfig, combined_loss
from .nets import NetworkSpec, build_network, forward, segresnet_spec
from .preprocess import AugmentPolicy, augment, one_hot_decode, one_hot_encode
from .volume_io import LabelMask, MultiModalVolume

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1

Subject = Tuple[MultiModalVolume, LabelMask]


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    weight_decay: float = 1e-3
    amsgrad: bool = True
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 20
    batch_size: int = 1
    seed: int = 0
    deterministic: bool = True
    loss: LossConfig = LossConfig()
    augment: AugmentPolicy = AugmentPolicy()
    # models trained with augmentation when ``augment.enabled``
    augment_models: Tuple[str, ...] = ("ddunet",)
    # weight of per-decoder auxiliary losses (ddunet with aux_heads only)
    aux_loss_weight: float = 0.0
    model: NetworkSpec = dataclasses.field(default_factory=segresnet_spec)

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        object.__setattr__(self, "augment_models", tuple(self.augment_models))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @property
    def augment_active(self) -> bool:
        return self.augment.enabled and self.model.kind in self.augment_models


@dataclasses.dataclass
class TrainLog:
    seed: int
    config_hash: str
    steps: List[dict] = dataclasses.field(default_factory=list)
    epoch_loss: List[float] = dataclasses.field(default_factory=list)
    epoch_seconds: List[float] = dataclasses.field(default_factory=list)

    @property
    def losses(self) -> List[float]:
        return [s["loss"] for s in self.steps]

    def write_jsonl(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            for record in self.steps:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        return path

    def summary(self) -> dict:
        # wall-clock fields stay out so checkpoints are byte-reproducible
        return {"seed": self.seed, "config_hash": self.config_hash, "n_steps": len(self.steps),
                "epoch_loss": self.epoch_loss}


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.Optimizer:
    """AdamW (decoupled weight decay) with the AMSGrad max-of-second-moment rule."""
    return torch.optim.AdamW(params, lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.eps,
                             weight_decay=cfg.weight_decay, amsgrad=cfg.amsgrad)


def _sample_tensors(subject: Subject, cfg: TrainConfig, epoch: int, index: int):
    vol, mask = subject
    onehot = one_hot_encode(mask)
    if cfg.augment_active:
        vol, onehot = augment((vol, onehot), cfg.augment, epoch, rng_seed=[cfg.seed, epoch, index])
    x = torch.from_numpy(np.ascontiguousarray(vol.data, dtype=np.float32))
    t = torch.from_numpy(onehot.data.astype(np.float32))
    return x, t


def train_model(cfg: TrainConfig, dataset: Sequence[Subject], net: Optional[nn.Module] = None,
                on_step: Optional[Callable[[dict], None]] = None) -> Tuple[nn.Module, TrainLog]:
    """Train ``cfg.model`` on ``dataset`` for ``cfg.epochs`` passes.

    One epoch is one pass over the dataset in a seeded per-epoch order.
    Learning rate is constant. Returns the trained network and its log.
    """
    if not dataset:
        raise EmptyDataset("training dataset is empty")
    shapes = {tuple(vol.shape) for vol, _ in dataset}
    if len(shapes) != 1:
        raise ConfigError(f"subjects must share one crop shape, got {sorted(shapes)}")

    if net is None:
        net = build_network(cfg.model, seed=cfg.seed)
    train_log = TrainLog(seed=cfg.seed, config_hash=cfg.hash())
    prev_det = torch.are_deterministic_algorithms_enabled()
    step = 0
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        if cfg.deterministic:
            torch.use_deterministic_algorithms(True)
        try:
            optimizer = make_optimizer(net.parameters(), cfg)
            # a non-finite step surfaces as NonFiniteLoss with its step index
            net.check_finite = False
            net.train()
            for epoch in range(cfg.epochs):
                t0 = time.perf_counter()
                order = np.random.default_rng([cfg.seed, epoch]).permutation(len(dataset))
                epoch_losses = []
                for start in range(0, len(order), cfg.batch_size):
                    batch = [_sample_tensors(dataset[i], cfg, epoch, int(i))
                             for i in order[start:start + cfg.batch_size]]
                    x = torch.stack([b[0] for b in batch])
                    t = torch.stack([b[1] for b in batch])
                    try:
                        loss = _loss(net, x, t, cfg)
                    except NotNormalized as exc:
                        # softmax of NaN/Inf logits is the only way to get here
                        raise NonFiniteLoss(step) from exc
                    value = float(loss.detach())
                    if not np.isfinite(value):
                        raise NonFiniteLoss(step)
                    optimizer.zero_grad()
                    loss.backward()
                    optimizer.step()
                    record = {"step": step, "epoch": epoch, "loss": value, "timestamp": time.time()}
                    train_log.steps.append(record)
                    epoch_losses.append(value)
                    if on_step is not None:
                        on_step(record)
                    step += 1
                train_log.epoch_loss.append(float(np.mean(epoch_losses)))
                train_log.epoch_seconds.append(time.perf_counter() - t0)
                log.info("epoch %d/%d  loss %.5f  (%.1fs)", epoch + 1, cfg.epochs,
                         train_log.epoch_loss[-1], train_log.epoch_seconds[-1])
        finally:
            torch.use_deterministic_algorithms(prev_det)
            net.check_finite = True
    net.eval()
    return net, train_log


def _loss(net: nn.Module, x: torch.Tensor, t: torch.Tensor, cfg: TrainConfig) -> torch.Tensor:
    probs = torch.softmax(net(x), dim=1)
    loss = combined_loss(probs, t, cfg.loss)
    aux = getattr(net, "aux_outputs", None)
    if aux and cfg.aux_loss_weight > 0:
        for head in aux:
            loss = loss + cfg.aux_loss_weight * combined_loss(torch.softmax(head, dim=1), t, cfg.loss)
    return loss


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def predict_probs(net: nn.Module, vol: MultiModalVolume) -> np.ndarray:
    """Eval-mode softmax probabilities ``(4, D, H, W)``."""
    net.eval()
    with torch.no_grad():
        logits = forward(net, vol.data)
        return torch.softmax(logits, dim=0).numpy()


def predict_subject(net: nn.Module, vol: MultiModalVolume) -> LabelMask:
    return one_hot_decode(predict_probs(net, vol), meta=vol.meta)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(net: nn.Module, cfg: Optional[TrainConfig], train_log: Optional[TrainLog],
                    path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT,
        "spec": net.spec.to_json(),
        "spec_hash": net.spec.hash(),
        "seed": int(getattr(net, "seed", 0)),
        "train_config": json.dumps(cfg.to_dict(), sort_keys=True) if cfg is not None else "",
        "train_summary": json.dumps(train_log.summary(), sort_keys=True) if train_log else "",
        "state_dict": {k: v.detach().clone() for k, v in net.state_dict().items()},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path, expected_spec: Optional[NetworkSpec] = None) -> nn.Module:
    """Rebuild a network from ``path``.

    Raises :class:`SpecHashMismatch` when ``expected_spec`` is given and
    differs from the stored one, and :class:`CorruptFile` for unreadable or
    inconsistent files.
    """
    try:
        payload = torch.load(str(path), map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CorruptFile(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        if payload["format_version"] != CHECKPOINT_FORMAT:
            raise CorruptFile(f"unsupported checkpoint format {payload['format_version']}")
        spec = NetworkSpec.from_dict(json.loads(payload["spec"]))
        stored_hash = payload["spec_hash"]
        state = payload["state_dict"]
        seed = int(payload["seed"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptFile(f"malformed checkpoint {path}: {exc}") from exc
    if spec.hash() != stored_hash:
        raise CorruptFile(f"checkpoint {path}: stored spec does not match its hash")
    if expected_spec is not None and expected_spec.hash() != stored_hash:
        raise SpecHashMismatch(f"checkpoint {path} holds a {spec.kind} network, "
                               f"expected {expected_spec.kind} with a different spec")
    net = build_network(spec, seed=seed)
    try:
        net.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CorruptFile(f"checkpoint {path}: parameters do not fit spec: {exc}") from exc
    net.eval()
    return net
