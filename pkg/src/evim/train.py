"""Toy end-to-end training and gradient checking.

Full-scale training is out of scope; this module exists to prove the tape
differentiates the whole network. `train_toy` fits a miniature backbone on a
synthetic token-classification task (class-conditional Gaussian images on a
small grid) with plain SGD + momentum, deterministically per seed.
`gradcheck_mixer` validates the composed mixer layer against central finite
differences, leaf by leaf.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from . import mixer as mx
from . import ops
from .autodiff import Var
from .ops import ContractError, F64


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step


@dataclass
class DatasetSpec:
    """Class-conditional Gaussian images: mean pattern per class plus noise."""

    num_classes: int = 2
    resolution: tuple[int, int] = (128, 128)
    contrast: float = 1.0
    noise: float = 0.25


@dataclass
class TrainConfig:
    steps: int
    batch_size: int = 8
    learning_rate: float = 0.05
    seed: int = 0
    momentum: float = 0.9
    msf: bool = True
    dataset: DatasetSpec = field(default_factory=DatasetSpec)

    def __post_init__(self):
        if self.steps < 1:
            raise ContractError(f"steps must be >= 1, got {self.steps}")
        if self.learning_rate < 0:
            raise ContractError(f"learning rate must be >= 0, got {self.learning_rate}")


def mini_config(dataset: DatasetSpec | None = None) -> bb.ModelConfig:
    """A miniature clone of the smallest preset: 8x8 stem grid, 3 stages."""
    ds = dataset or DatasetSpec()
    return bb.ModelConfig(
        blocks_per_stage=(2, 2, 2),
        channels=(16, 24, 32),
        states=(16, 8, 4),
        input_resolution=ds.resolution,
        num_classes=ds.num_classes,
        variant_name="mini",
    )


class GaussianGridData:
    """Balanced batches of `mean[class] + noise * N(0,1)` images."""

    def __init__(self, spec: DatasetSpec, rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        self.rng = rng
        self.dtype = dtype
        h, w = spec.resolution
        self.means = (
            rng.standard_normal((spec.num_classes, h, w, 3)) * spec.contrast
        ).astype(dtype)

    def batch(self, size: int):
        labels = np.arange(size) % self.spec.num_classes
        self.rng.shuffle(labels)
        h, w = self.spec.resolution
        noise = self.rng.standard_normal((size, h, w, 3)).astype(self.dtype)
        imgs = self.means[labels] + self.spec.noise * noise
        return imgs, labels


# ---------------------------------------------------------------------------
# loss and optimizer


def cross_entropy(logits: Var, labels: np.ndarray) -> Var:
    """Mean softmax cross-entropy; the stabilizing max-shift is detached."""
    shift = logits.value.max(axis=-1, keepdims=True)
    shifted = ad.add(logits, -shift)
    lse = ad.log(ad.sum_(ad.exp(shifted), axis=-1, keepdims=True))
    logp = ad.add(shifted, ad.neg(lse))
    picked = logp[np.arange(len(labels)), labels]
    return ad.neg(ad.mean(picked))


def trainable_params(model: bb.ModelWeights) -> list[Var]:
    """Wrap every learnable tensor in a Var, in place; BN stats stay buffers."""
    params = []
    for name, obj, attr in bb.walk_weights(model):
        if bb.is_buffer(name):
            continue
        v = Var(getattr(obj, attr), op=name)
        setattr(obj, attr, v)
        params.append(v)
    return params


class SGD:
    def __init__(self, params: list[Var], lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.value) for p in params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.value -= (self.lr * v).astype(p.value.dtype, copy=False)


# ---------------------------------------------------------------------------
# the toy loop


@dataclass
class TrainResult:
    steps: list[tuple[int, float, float]]  # (step, loss, batch accuracy)
    final_accuracy: float
    fusion_weight_sums: list[float]  # softmax(beta) total per step (1.0 if healthy)


def train_toy(cfg: bb.ModelConfig, tc: TrainConfig, eval_samples: int = 100) -> TrainResult:
    """SGD on the synthetic task; returns the loss curve and eval accuracy.

    Deterministic given tc.seed. Raises TrainingDiverged if the loss goes
    non-finite.
    """
    rng = np.random.default_rng(tc.seed)
    data = GaussianGridData(tc.dataset, rng)
    model = bb.init_model(cfg, rng)
    params = trainable_params(model)
    opt = SGD(params, tc.learning_rate, tc.momentum)

    rows = []
    weight_sums = []
    for step in range(tc.steps):
        imgs, labels = data.batch(tc.batch_size)
        ad.zero_grad(params)
        logits, _ = bb.model_forward(imgs, model, training=True, fuse=tc.msf)
        loss = cross_entropy(logits, labels)
        loss_val = float(loss.value)
        if not np.isfinite(loss_val):
            raise TrainingDiverged(step)
        acc = float(np.mean(np.argmax(logits.value, axis=-1) == labels))
        ad.backward(loss)
        opt.step()
        rows.append((step, loss_val, acc))
        beta = model.fusion.beta
        beta_val = beta.value if isinstance(beta, Var) else beta
        weight_sums.append(float(ops.softmax(np.asarray(beta_val)).sum()))

    eval_imgs, eval_labels = data.batch(eval_samples)
    eval_logits, _ = bb.model_forward(eval_imgs, model, training=False, fuse=tc.msf)
    eval_val = eval_logits.value if isinstance(eval_logits, Var) else eval_logits
    final_acc = float(np.mean(np.argmax(eval_val, axis=-1) == eval_labels))
    return TrainResult(rows, final_acc, weight_sums)


# ---------------------------------------------------------------------------
# gradient check of the composed mixer layer


def gradcheck_mixer(cfg: mx.MixerConfig, seed: int = 0, eps: float = 1e-5) -> float:
    """Worst relative error of taped vs finite-difference gradients for every
    mixer leaf, through the full layer plus its scaled residual."""
    if cfg.tokens > 64 or cfg.states > 16 or cfg.channels > 32:
        raise ContractError("gradcheck is for small configurations only")
    rng = np.random.default_rng(seed)
    grid = _square_grid(cfg.tokens)
    params = mx.init_mixer_params(cfg, rng, dtype=F64)
    params.layer_scale = rng.uniform(0.5, 1.5, cfg.channels)  # exercise the residual scale
    x_in = rng.standard_normal((cfg.tokens, cfg.channels))
    probe = rng.standard_normal((cfg.tokens, cfg.channels))

    leaves = [(name, Var(arr, op=name)) for name, arr in params.named_arrays()]
    for name, v in leaves:
        setattr(params, name, v)

    def build_loss():
        x_out, _ = mx.hsm_ssd_layer(x_in, params, grid)
        y = ad.add(x_in, ad.mul(params.layer_scale, x_out))
        return ad.sum_(ad.mul(y, probe))

    return ad.check_gradients(build_loss, [v for _, v in leaves], eps=eps)


def _square_grid(tokens: int) -> tuple[int, int]:
    side = int(round(tokens**0.5))
    if side * side == tokens:
        return (side, side)
    return (1, tokens)
