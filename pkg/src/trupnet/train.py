"""Adam training loop with deterministic shuffling and checkpointing.

Per-epoch randomness derives from (seed, epoch) and per-sample
augmentation from (seed, epoch, sample-id), so a run can resume from a
checkpoint and reproduce the uninterrupted loss trace bitwise.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import augment, sample_rng
from .errors import CheckpointError, ContractError, FormatError, NumericError
from .losses import combined_loss
from .model import TransRUPNet
from .serialize import read_tensor, write_tensor
from .tensor import DTYPE, Tape, Tensor, backward


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 8
    epochs: int = 1
    seed: int = 0
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    augment: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")


class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    def __init__(self, named_params, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in named_params}


def adam_step(named_params, grads, state: AdamState) -> None:
    """One Adam update: bias-corrected moments, then theta -= lr*m^/(sqrt(v^)+eps)."""
    for name, _ in named_params:
        g = grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    state.t += 1
    b1, b2 = DTYPE(state.beta1), DTYPE(state.beta2)
    corr1 = DTYPE(1.0 - state.beta1**state.t)
    corr2 = DTYPE(1.0 - state.beta2**state.t)
    lr, eps = DTYPE(state.lr), DTYPE(state.eps)
    for name, p in named_params:
        g = grads.get(name)
        if g is None:
            continue
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / corr1
        v_hat = v / corr2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def _stack_batch(samples):
    images = np.stack([s.image.data for s in samples])
    masks = np.stack([s.mask.data for s in samples])
    return Tensor(images), Tensor(masks)


def train_epoch(model: TransRUPNet, optim: AdamState, dataset, cfg: TrainConfig, epoch: int):
    """One pass over the dataset; returns (mean loss, per-step losses).

    Order: shuffle by (seed, epoch), batch (last partial batch kept),
    augment, forward in train mode, combined loss, backward, adam step.
    A numeric error propagates and leaves parameters at the last
    completed step.
    """
    dataset = list(dataset)
    if not dataset:
        raise ContractError("train_epoch: dataset is empty")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch]))
    order = rng.permutation(len(dataset))
    named_params = model.named_parameters()
    step_losses = []
    for start in range(0, len(dataset), cfg.batch_size):
        batch = [dataset[i] for i in order[start : start + cfg.batch_size]]
        if cfg.augment:
            batch = [augment(s, sample_rng(cfg.seed, epoch, s.id)) for s in batch]
        x, y = _stack_batch(batch)
        with Tape() as tape:
            pred = model.forward(x, mode="train")
            loss = combined_loss(pred, y)
        backward(loss, tape)
        grads = {name: p.grad for name, p in named_params}
        adam_step(named_params, grads, optim)
        step_losses.append(float(loss.data))
    return float(np.mean(step_losses)), step_losses


def save_checkpoint(directory, model: TransRUPNet, optim: AdamState, cfg: TrainConfig, next_epoch: int) -> None:
    """Full training bundle: model + optimizer moments + rng derivation state."""
    directory = Path(directory)
    model.save(directory)
    optim_dir = directory / "optim"
    optim_dir.mkdir(parents=True, exist_ok=True)
    for name, arr in optim.m.items():
        write_tensor(optim_dir / f"{name}.m.trup", arr)
    for name, arr in optim.v.items():
        write_tensor(optim_dir / f"{name}.v.trup", arr)
    (directory / "optim_state.txt").write_text(
        f"t={optim.t}\nlr={optim.lr!r}\nbeta1={optim.beta1!r}\nbeta2={optim.beta2!r}\neps={optim.eps!r}\n"
    )
    (directory / "rng_state.json").write_text(
        json.dumps({"seed": cfg.seed, "next_epoch": next_epoch}) + "\n"
    )


def restore_checkpoint(directory):
    """Load a training bundle; returns (model, optim, next_epoch, seed)."""
    directory = Path(directory)
    try:
        model = TransRUPNet.load(directory)
    except FormatError as e:
        raise CheckpointError(str(e)) from e
    named_params = model.named_parameters()
    state_path = directory / "optim_state.txt"
    if not state_path.is_file():
        raise CheckpointError(f"{directory}: missing optim_state.txt")
    kv = dict(line.split("=", 1) for line in state_path.read_text().splitlines() if line)
    optim = AdamState(
        named_params,
        lr=float(kv["lr"]),
        beta1=float(kv["beta1"]),
        beta2=float(kv["beta2"]),
        eps=float(kv["eps"]),
    )
    optim.t = int(kv["t"])
    for name, p in named_params:
        try:
            m = read_tensor(directory / "optim" / f"{name}.m.trup")
            v = read_tensor(directory / "optim" / f"{name}.v.trup")
        except (FormatError, OSError) as e:
            raise CheckpointError(f"cannot read optimizer state for {name}: {e}") from e
        if m.shape != p.shape or v.shape != p.shape:
            raise CheckpointError(f"optimizer state shape mismatch for {name}")
        optim.m[name] = m
        optim.v[name] = v
    rng_path = directory / "rng_state.json"
    if not rng_path.is_file():
        raise CheckpointError(f"{directory}: missing rng_state.json")
    rng_state = json.loads(rng_path.read_text())
    return model, optim, int(rng_state["next_epoch"]), int(rng_state["seed"])


def _append_log(path, epoch, step_losses):
    path = Path(path)
    new = not path.exists()
    with open(path, "a") as f:
        if new:
            f.write("epoch,step,loss\n")
        for step, loss in enumerate(step_losses):
            f.write(f"{epoch},{step},{loss!r}\n")


def fit(model: TransRUPNet, dataset, cfg: TrainConfig, out_dir=None, optim: AdamState | None = None, start_epoch: int = 0, log=None):
    """Run cfg.epochs epochs; returns the list of per-epoch mean losses.

    With ``out_dir`` set, appends to train_log.csv, saves periodic
    checkpoints every cfg.checkpoint_every epochs under epoch_NNNN/, and
    always saves a final bundle under checkpoint/.
    """
    if optim is None:
        optim = AdamState(model.named_parameters(), lr=cfg.lr)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    epoch_losses = []
    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        mean_loss, step_losses = train_epoch(model, optim, dataset, cfg, epoch)
        epoch_losses.append(mean_loss)
        if log is not None:
            log(f"epoch {epoch}: loss {mean_loss:.6f}")
        if out_dir is not None:
            _append_log(out_dir / "train_log.csv", epoch, step_losses)
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out_dir / f"epoch_{epoch + 1:04d}", model, optim, cfg, epoch + 1)
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint", model, optim, cfg, start_epoch + cfg.epochs)
    return epoch_losses
