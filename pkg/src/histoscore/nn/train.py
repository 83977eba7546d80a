"""Mini-batch training with Adam, label augmentation and geometric augmentation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..augment import DlaConfig, apply_transform, augment_labels, draw_transform
from .losses import dice_loss, score_loss
from .network import Model, NetworkSpec, ShapeError, with_dropout
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    """Per-column input stacks (n, c, h, w) and targets.

    Targets are (n,) scores for score networks and (n, 1, h, w) masks for
    mask networks.
    """

    inputs: list[np.ndarray]
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = [np.asarray(x) for x in self.inputs]
        self.targets = np.asarray(self.targets)
        n = {x.shape[0] for x in self.inputs} | {self.targets.shape[0]}
        if len(n) != 1:
            raise ShapeError(f"inconsistent sample counts {sorted(n)}")

    def __len__(self):
        return self.targets.shape[0]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset([x[idx] for x in self.inputs], self.targets[idx])


@dataclass(frozen=True)
class Hyperparams:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dropout: tuple[float, float] = (0.3, 0.5)
    # None disables label augmentation
    dla: DlaConfig | None = field(default_factory=DlaConfig)
    augment: bool = True
    max_shift_frac: float = 0.05
    # per-input background value used to fill rotated-in corners
    fill: tuple[float, ...] = ()
    # per-input interpolation order for arbitrary-angle rotation (default bilinear)
    order: tuple[int, ...] = ()
    max_steps: int | None = None
    dtype: str = "float32"


def _augment_batch(batch: list[np.ndarray], rng, hp: Hyperparams, masks: np.ndarray | None = None):
    """One shared random transform per sample across every input and its mask."""
    out = [np.empty_like(x) for x in batch]
    out_masks = None if masks is None else np.empty_like(masks)
    for i in range(batch[0].shape[0]):
        draw = draw_transform(batch[0].shape[-2:], rng, hp.max_shift_frac)
        for j, x in enumerate(batch):
            fill = hp.fill[j] if j < len(hp.fill) else 0.0
            order = hp.order[j] if j < len(hp.order) else 1
            out[j][i] = apply_transform(x[i], draw, order=order, fill=fill)
        if masks is not None:
            out_masks[i] = apply_transform(masks[i], draw, order=0, fill=0)
    return out, out_masks


def train(spec: NetworkSpec, dataset: Dataset, hp: Hyperparams = Hyperparams(), seed: int = 0) -> Model:
    """Fit a model; deterministic for a given seed."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    for x, shape in zip(dataset.inputs, spec.input_shapes):
        if x.shape[1:] != shape:
            raise ShapeError(f"dataset input {x.shape[1:]} does not match network input {shape}")
    if len(dataset.inputs) != len(spec.input_shapes):
        raise ShapeError(f"network takes {len(spec.input_shapes)} inputs, dataset has {len(dataset.inputs)}")
    if spec.task == "score" and dataset.targets.ndim != 1:
        raise ShapeError("score networks need (n,) targets")
    if spec.arch != "mini_unet":
        spec = with_dropout(spec, hp.dropout)

    init_ss, order_ss, aug_ss, label_ss, drop_ss = np.random.SeedSequence(seed).spawn(5)
    model = Model(spec, seed=int(init_ss.generate_state(1)[0]), dtype=hp.dtype)
    model.reseed(drop_ss)
    model.set_input_grad(False)
    order_rng = np.random.default_rng(order_ss)
    aug_rng = np.random.default_rng(aug_ss)

    n = len(dataset)
    label_sets = None
    if spec.task == "score" and hp.dla is not None:
        label_rng = np.random.default_rng(label_ss)
        label_sets = np.stack([augment_labels(float(l), hp.dla, label_rng) for l in dataset.targets])

    state = AdamState(lr=hp.lr, beta1=hp.beta1, beta2=hp.beta2, eps=hp.eps)
    params = [p for _, p in model.parameters()]
    step = 0
    for epoch in range(hp.epochs):
        perm = order_rng.permutation(n)
        for start in range(0, n, hp.batch_size):
            idx = perm[start : start + hp.batch_size]
            batch = [x[idx] for x in dataset.inputs]
            if spec.task == "score":
                if label_sets is not None:
                    targets = label_sets[idx, epoch % label_sets.shape[1]].astype(np.float64)
                else:
                    targets = dataset.targets[idx].astype(np.float64)
                if hp.augment:
                    batch, _ = _augment_batch(batch, aug_rng, hp)
                pred = model.forward(batch, train=True)
                loss, grad = score_loss(pred, targets)
            else:
                targets = dataset.targets[idx]
                if hp.augment:
                    batch, targets = _augment_batch(batch, aug_rng, hp, masks=targets)
                pred = model.forward(batch, train=True)
                loss, grad = dice_loss(pred, targets)
            model.backward(grad)
            adam_step(params, model.gradients(), state)
            model.loss_curve.append(loss)
            step += 1
            if hp.max_steps is not None and step >= hp.max_steps:
                return model
        log.debug("epoch %d loss %.4f", epoch, float(np.mean(model.loss_curve[-(n // hp.batch_size + 1):])))
    return model


def predict(model: Model, inputs, batch_size: int = 64) -> np.ndarray:
    """Scores clamped to [0, 300], or per-pixel mask probabilities."""
    return model.predict(inputs, batch_size)


KINK_TOLERANCE = 1e-5


def gradient_check(
    spec_or_model,
    loss: str = "l2",
    seed: int = 0,
    batch: int = 2,
    samples_per_tensor: int = 12,
    step: float = 1e-5,
    include_inputs: bool = True,
    train_mode: bool = True,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs in double precision. Dropout draws the same mask on every forward
    pass because the dropout stream is reset before each one.
    """
    from .losses import LOSSES

    rng = np.random.default_rng(seed)
    if isinstance(spec_or_model, Model):
        model = spec_or_model
    else:
        model = Model(spec_or_model, seed=seed, dtype=np.float64)
        # zero biases leave dead patches exactly on the ReLU kink
        for name, p in model.parameters():
            if name.endswith(".b"):
                p += rng.normal(0.0, 0.05, size=p.shape)
    spec = model.spec
    inputs = [rng.uniform(0.05, 1.0, size=(batch,) + s) for s in spec.input_shapes]
    if loss == "dice":
        target = (rng.random((batch, 1, spec.input_res, spec.input_res)) > 0.5).astype(np.float64)
    else:
        target = rng.uniform(0.0, 300.0, size=batch) if spec.task == "score" else rng.random(
            (batch, 1, spec.input_res, spec.input_res)
        )
    loss_fn = LOSSES[loss]

    def objective():
        model.reseed(seed)
        out = model.forward(inputs, train=train_mode)
        return loss_fn(out, target)

    base, g = objective()
    input_grads = model.backward(g)
    analytic = [gr.copy() for gr in model.gradients()]

    def rel(a, b):
        return abs(a - b) / max(abs(a) + abs(b), 1e-6)

    worst = 0.0
    skipped = 0

    def probe(flat, i, a):
        nonlocal worst, skipped
        orig = flat[i]
        flat[i] = orig + step
        up, _ = objective()
        flat[i] = orig - step
        down, _ = objective()
        flat[i] = orig
        # one-sided slopes disagree only when the probe straddles a ReLU or max-pool kink
        if rel((up - base) / step, (base - down) / step) > KINK_TOLERANCE:
            skipped += 1
            return
        worst = max(worst, rel(a, (up - down) / (2 * step)))

    for (_, p), a in zip(model.parameters(), analytic):
        flat = p.reshape(-1)
        picks = rng.choice(flat.size, size=min(samples_per_tensor, flat.size), replace=False)
        for i in picks:
            probe(flat, i, a.reshape(-1)[i])
    if include_inputs:
        for x, gx in zip(inputs, input_grads):
            flat = x.reshape(-1)
            picks = rng.choice(flat.size, size=min(samples_per_tensor, flat.size), replace=False)
            for i in picks:
                probe(flat, i, gx.reshape(-1)[i])
    if skipped:
        log.debug("gradient check skipped %d probes straddling a kink", skipped)
    return worst
