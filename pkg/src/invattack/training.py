"""Desk-scale adversarial training and robust-error evaluation.

A small fully-connected rectifier network with hand-written analytic
gradients (checked against finite differences in the tests), trained with an
adaptive-moment optimizer on max-norm PGD examples. Evaluation reports the
fraction of test points broken anywhere inside the perturbation ball; sweeps
over growing radii reuse smaller-ball breaks so the estimate is monotone by
construction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .dataset_io import Dataset, GrayImage
from .errors import (DimensionMismatch, DivergenceDetected, EmptyInput,
                     InvalidParams)
from .rng import rng_stream
from .transforms import TransformParams, apply_transform

CHECKPOINT_MAGIC = b"IVAT"
CHECKPOINT_VERSION = 1

_STREAM_INIT = 11
_STREAM_ORDER = 12
_STREAM_PGD = 13
_STREAM_SPATIAL = 14


@dataclass
class MlpModel:
    """Fully-connected rectifier net; weights[i] has shape (out, in)."""
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]


def init_model(layer_sizes: list[int], seed: int) -> MlpModel:
    """He-scaled random initialization, reproducible by seed."""
    rng = rng_stream(seed, _STREAM_INIT)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        scale = np.sqrt(2.0 / fan_in)
        weights.append(rng.normal(0.0, scale, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpModel(weights=weights, biases=biases)


def _as_input_matrix(model: MlpModel, x) -> np.ndarray:
    if isinstance(x, GrayImage):
        x = x.flat
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != model.input_dim:
        raise DimensionMismatch(
            f"input of dim {arr.shape} does not match model input {model.input_dim}")
    return arr


def _forward_cache(model: MlpModel, x_mat: np.ndarray):
    """Returns (logits, pre-activations, activations incl. input)."""
    acts = [x_mat]
    zs = []
    a = x_mat
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w.T + b
        zs.append(z)
        a = z if i == last else np.maximum(z, 0.0)
        acts.append(a)
    return acts[-1], zs, acts


def forward(model: MlpModel, image) -> np.ndarray:
    """Per-category scores for one input."""
    logits, _, _ = _forward_cache(model, _as_input_matrix(model, image))
    return logits[0]


def predict(model: MlpModel, image) -> int:
    """argmax score; ties resolve to the lowest category index."""
    return int(np.argmax(forward(model, image)))


def predict_batch(model: MlpModel, x_mat: np.ndarray) -> np.ndarray:
    logits, _, _ = _forward_cache(model, _as_input_matrix(model, x_mat))
    return np.argmax(logits, axis=1)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(model: MlpModel, x_mat: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-example loss values."""
    logits, _, _ = _forward_cache(model, _as_input_matrix(model, x_mat))
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1)) + logits.max(axis=1)
    return logsumexp - logits[np.arange(len(labels)), labels]


def _backward(model: MlpModel, zs, acts, dlogits):
    """Backprop dlogits to parameter grads and the input gradient."""
    grads_w, grads_b = [], []
    delta = dlogits
    for i in range(len(model.weights) - 1, -1, -1):
        grads_w.append(delta.T @ acts[i])
        grads_b.append(delta.sum(axis=0))
        if i > 0:
            delta = (delta @ model.weights[i]) * (zs[i - 1] > 0.0)
        else:
            delta = delta @ model.weights[i]
    return grads_w[::-1], grads_b[::-1], delta


def loss_and_grads(model: MlpModel, x_mat: np.ndarray, labels: np.ndarray):
    """(mean loss, weight grads, bias grads) for a batch."""
    x_mat = _as_input_matrix(model, x_mat)
    logits, zs, acts = _forward_cache(model, x_mat)
    probs = _softmax(logits)
    n = x_mat.shape[0]
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1)) + logits.max(axis=1)
    loss = float(np.mean(logsumexp - logits[np.arange(n), labels]))
    gw, gb, _ = _backward(model, zs, acts, dlogits)
    return loss, gw, gb


def grad_input_batch(model: MlpModel, x_mat: np.ndarray,
                     labels: np.ndarray) -> np.ndarray:
    """Gradient of the summed cross-entropy w.r.t. each input row."""
    x_mat = _as_input_matrix(model, x_mat)
    logits, zs, acts = _forward_cache(model, x_mat)
    probs = _softmax(logits)
    dlogits = probs.copy()
    dlogits[np.arange(x_mat.shape[0]), labels] -= 1.0
    _, _, dx = _backward(model, zs, acts, dlogits)
    return dx


def grad_input(model: MlpModel, image, label: int) -> np.ndarray:
    """Exact analytic gradient of the loss w.r.t. the input pixels."""
    x_mat = _as_input_matrix(model, image)
    return grad_input_batch(model, x_mat, np.array([label]))[0]


# --- PGD ---

def pgd_linf_batch(model: MlpModel, x_mat: np.ndarray, labels: np.ndarray,
                   eps: float, steps: int,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Max-norm PGD with random start and step size 2.5*eps/steps."""
    if eps < 0:
        raise InvalidParams("eps must be >= 0")
    if steps < 1:
        raise InvalidParams("steps must be >= 1")
    x0 = _as_input_matrix(model, x_mat)
    if eps == 0.0:
        return x0.copy()
    if rng is None:
        rng = rng_stream(0, _STREAM_PGD)
    x = x0 + rng.uniform(-eps, eps, size=x0.shape)
    np.clip(x, 0.0, 1.0, out=x)
    step = 2.5 * eps / steps
    for _ in range(steps):
        g = grad_input_batch(model, x, labels)
        x = x + step * np.sign(g)
        np.clip(x, x0 - eps, x0 + eps, out=x)
        np.clip(x, 0.0, 1.0, out=x)
    return x


def pgd_linf(model: MlpModel, image, label: int, eps: float, steps: int,
             seed: int = 0) -> np.ndarray:
    """Single-input PGD; returns a flat pixel vector inside both constraints."""
    x_mat = _as_input_matrix(model, image)
    rng = rng_stream(seed, _STREAM_PGD)
    return pgd_linf_batch(model, x_mat, np.array([label]), eps, steps, rng)[0]


# --- training ---

@dataclass(frozen=True)
class TrainConfig:
    eps_train: float = 0.0
    pgd_steps: int = 40
    epochs: int = 10
    batch_size: int = 100
    lr: float = 1e-3
    lr_low: float = 1e-4
    hidden: tuple[int, ...] = (256, 128)
    num_classes: int = 10
    warm_start: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.eps_train <= 1.0:
            raise InvalidParams("eps_train must be in [0,1]")
        if self.pgd_steps < 1:
            raise InvalidParams("pgd_steps must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidParams("epochs and batch_size must be >= 1")


def epoch_epsilon(cfg: TrainConfig, epoch: int) -> float:
    """Per-epoch training radius: first epoch at a third of the budget, and
    for budgets >= 0.25 a warm start from 0.2 raised by 0.05 every 5 epochs."""
    eps = cfg.eps_train
    if eps == 0.0:
        return 0.0
    if epoch == 1:
        return eps / 3.0
    if eps < 0.25 or not cfg.warm_start:
        return eps
    return min(0.2 + 0.05 * ((epoch - 1) // 5), eps)


class _Adam:
    def __init__(self, params: list[np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adversarial_train(ds: Dataset, cfg: TrainConfig) -> MlpModel:
    """Train on PGD examples crafted against the evolving model.

    Deterministic given (seed, config, dataset): batch order, PGD starts and
    initialization all come from per-epoch seeded streams.
    """
    x_all = ds.matrix().astype(np.float64)
    y_all = ds.labels()
    sizes = [x_all.shape[1], *cfg.hidden, cfg.num_classes]
    model = init_model(sizes, cfg.seed)
    params = model.weights + model.biases
    opt = _Adam(params)
    n = x_all.shape[0]
    half = cfg.epochs // 2
    for epoch in range(1, cfg.epochs + 1):
        eps_e = epoch_epsilon(cfg, epoch)
        lr = cfg.lr if epoch <= half or cfg.epochs == 1 else cfg.lr_low
        order = rng_stream(cfg.seed, _STREAM_ORDER, epoch).permutation(n)
        for bi, lo in enumerate(range(0, n, cfg.batch_size)):
            rows = order[lo:lo + cfg.batch_size]
            xb, yb = x_all[rows], y_all[rows]
            if eps_e > 0.0:
                rng = rng_stream(cfg.seed, _STREAM_PGD, epoch, bi)
                xb = pgd_linf_batch(model, xb, yb, eps_e, cfg.pgd_steps, rng)
            loss, gw, gb = loss_and_grads(model, xb, yb)
            if not np.isfinite(loss):
                raise DivergenceDetected(f"non-finite loss at epoch {epoch}")
            opt.step(params, gw + gb, lr)
    return model


# --- evaluation ---

@dataclass
class RobustErrorReport:
    eps_eval: float
    clean_error: float
    robust_error: float
    n: int
    attack: str


@dataclass(frozen=True)
class PgdAttack:
    steps: int = 40
    seed: int = 0

    @property
    def name(self) -> str:
        return f"pgd{self.steps}"

    def run(self, model: MlpModel, x_mat: np.ndarray, labels: np.ndarray,
            eps: float) -> np.ndarray:
        rng = rng_stream(self.seed, _STREAM_PGD, 999)
        return pgd_linf_batch(model, x_mat, labels, eps, self.steps, rng)


@dataclass(frozen=True)
class SpatialAdversaryConfig:
    rotation_range: float = 10.0
    translate_range: float = 3.0
    num_transforms: int = 10
    pgd_steps: int = 40
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rotation_range <= 20.0:
            raise InvalidParams("rotation_range must be within [0, 20] degrees")
        if not 0.0 <= self.translate_range <= 6.0:
            raise InvalidParams("translate_range must be within [0, 6] px")
        if self.num_transforms < 1:
            raise InvalidParams("num_transforms must be >= 1")


def _sample_spatial_params(scfg: SpatialAdversaryConfig, rng) -> TransformParams:
    return TransformParams(
        rotation_deg=float(rng.uniform(-scfg.rotation_range, scfg.rotation_range)),
        shift_x=float(rng.uniform(-scfg.translate_range, scfg.translate_range)),
        shift_y=float(rng.uniform(-scfg.translate_range, scfg.translate_range)))


@dataclass(frozen=True)
class SpatialPgdAttack:
    scfg: SpatialAdversaryConfig

    @property
    def name(self) -> str:
        return (f"spatial{self.scfg.num_transforms}"
                f"r{self.scfg.rotation_range:g}t{self.scfg.translate_range:g}"
                f"+pgd{self.scfg.pgd_steps}")

    def run(self, model: MlpModel, x_mat: np.ndarray, labels: np.ndarray,
            eps: float) -> np.ndarray:
        side = int(round(np.sqrt(x_mat.shape[1])))
        n = x_mat.shape[0]
        best = None
        best_loss = np.full(n, -np.inf)
        for t_idx in range(self.scfg.num_transforms):
            x_t = np.empty_like(x_mat)
            for i in range(n):
                if t_idx == 0:
                    x_t[i] = x_mat[i]  # identity is always in the sample
                    continue
                rng_t = rng_stream(self.scfg.seed, _STREAM_SPATIAL, t_idx, i)
                p = _sample_spatial_params(self.scfg, rng_t)
                img = GrayImage(np.clip(x_mat[i], 0.0, 1.0)
                                .astype(np.float32).reshape(side, side))
                x_t[i] = apply_transform(img, p).flat
            if t_idx == 0:
                # identity slot reproduces the plain PGD attack bit for bit
                rng = rng_stream(self.scfg.seed, _STREAM_PGD, 999)
            else:
                rng = rng_stream(self.scfg.seed, _STREAM_SPATIAL, 1000 + t_idx)
            x_adv = pgd_linf_batch(model, x_t, labels, eps,
                                   self.scfg.pgd_steps, rng)
            losses = cross_entropy(model, x_adv, labels)
            if best is None:
                best, best_loss = x_adv, losses
            else:
                take = losses > best_loss
                best = np.where(take[:, None], x_adv, best)
                best_loss = np.maximum(best_loss, losses)
        return best


def spatial_pgd(model: MlpModel, image, label: int,
                scfg: SpatialAdversaryConfig, eps: float) -> np.ndarray:
    """Strongest of PGD runs applied to randomly transformed copies of one
    input (identity included); strongest = highest loss."""
    x_mat = _as_input_matrix(model, image)
    return SpatialPgdAttack(scfg).run(model, x_mat, np.array([label]), eps)[0]


def robust_error_sweep(model: MlpModel, ds: Dataset, eps_list: list[float],
                       attack) -> list[RobustErrorReport]:
    """Robust error at each radius (ascending), reusing smaller-ball breaks.

    A point counts as broken once any evaluated ball contains a misclassified
    perturbation; the clean point itself is always part of the ball, so the
    estimate is at least the clean error and non-decreasing in eps.
    """
    if sorted(eps_list) != list(eps_list):
        raise InvalidParams("eps_list must be ascending")
    x_all = ds.matrix().astype(np.float64)
    y_all = ds.labels()
    clean_wrong = predict_batch(model, x_all) != y_all
    clean_error = float(np.mean(clean_wrong))
    broken = clean_wrong.copy()
    reports = []
    for eps in eps_list:
        if eps < 0:
            raise InvalidParams("eps must be >= 0")
        alive = np.flatnonzero(~broken)
        if eps > 0 and len(alive):
            x_adv = attack.run(model, x_all[alive], y_all[alive], eps)
            newly = predict_batch(model, x_adv) != y_all[alive]
            broken[alive[newly]] = True
        reports.append(RobustErrorReport(
            eps_eval=float(eps), clean_error=clean_error,
            robust_error=float(np.mean(broken)), n=len(ds),
            attack=getattr(attack, "name", str(attack))))
    return reports


def robust_error(model: MlpModel, ds: Dataset, eps: float, attack) -> RobustErrorReport:
    return robust_error_sweep(model, ds, [eps], attack)[0]


def invariance_rate(model: MlpModel, examples) -> float:
    """Fraction of invariance examples on which the model keeps its original
    prediction (higher = more vulnerable to invariance attacks)."""
    examples = list(examples)
    if not examples:
        raise EmptyInput("no invariance examples given")
    same = [predict(model, ex.adversarial) == predict(model, ex.source.image)
            for ex in examples]
    return float(np.mean(same))


# --- checkpoints ---

def save_model(model: MlpModel, path) -> None:
    """Versioned binary: magic, version u16, layer sizes, f32 params."""
    sizes = model.layer_sizes
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<H", CHECKPOINT_VERSION))
        f.write(struct.pack("<H", len(sizes)))
        f.write(struct.pack(f"<{len(sizes)}I", *sizes))
        for w, b in zip(model.weights, model.biases):
            f.write(w.astype("<f4").tobytes())
            f.write(b.astype("<f4").tobytes())


def load_model(path) -> MlpModel:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise InvalidParams("not a model checkpoint (bad magic)")
    version, = struct.unpack_from("<H", data, 4)
    if version != CHECKPOINT_VERSION:
        raise InvalidParams(f"unsupported checkpoint version {version}")
    n_sizes, = struct.unpack_from("<H", data, 6)
    sizes = list(struct.unpack_from(f"<{n_sizes}I", data, 8))
    off = 8 + 4 * n_sizes
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = np.frombuffer(data, dtype="<f4", count=fan_out * fan_in, offset=off)
        off += 4 * fan_out * fan_in
        b = np.frombuffer(data, dtype="<f4", count=fan_out, offset=off)
        off += 4 * fan_out
        weights.append(w.reshape(fan_out, fan_in).astype(np.float64))
        biases.append(b.astype(np.float64))
    return MlpModel(weights=weights, biases=biases)
