"""Progressive order-wise estimation of clean SHCs.

The mixed SHC tensor is split into order groups (orders 0-1, then one group
per order). Stage ``g`` sees the *predicted* groups ``1..g-1`` stacked with
the *mixed* group ``g`` and predicts clean group ``g``; it never sees mixed
groups above ``g``. Stages are interchangeable estimators: oracle
substitution, oracle magnitude mask, Wiener gain, or a trainable per-bin
complex linear map.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .sh_core import order_from_count
from .sht import merge_groups, order_groups, sht_inverse
from .stft import StftConfig, istft

MASK_EPS = 1e-12
WIENER_FLOOR = 0.05


@dataclass
class StageInput:
    predicted_lower: list
    mixed_current: np.ndarray

    def stacked(self) -> np.ndarray:
        return np.concatenate(list(self.predicted_lower) + [self.mixed_current], axis=0)


class Stage:
    """Base class; subclasses implement :meth:`predict`."""

    kind = "base"
    uses_oracle = False
    trainable = False

    def predict(self, inp: StageInput, clean=None) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> dict:
        return {}


class OracleSubstitution(Stage):
    kind = "oracle-substitution"
    uses_oracle = True

    def predict(self, inp, clean=None):
        if clean is None:
            raise ConfigError("oracle-substitution stage needs the clean reference")
        if clean.shape != inp.mixed_current.shape:
            raise ShapeError(f"clean group {clean.shape} != mixed group {inp.mixed_current.shape}")
        return np.array(clean, dtype=np.complex128, copy=True)


def oracle_magnitude_mask(mixed, clean, eps: float = MASK_EPS) -> np.ndarray:
    """Mixed SHCs scaled by ``min(|clean| / (|mixed| + eps), 1)``; mixed phase kept."""
    mixed, clean = np.asarray(mixed), np.asarray(clean)
    if mixed.shape != clean.shape:
        raise ShapeError(f"mixed {mixed.shape} and clean {clean.shape} differ")
    gain = np.minimum(np.abs(clean) / (np.abs(mixed) + eps), 1.0)
    return mixed * gain


class OracleMagnitudeMask(Stage):
    kind = "oracle-magnitude-mask"
    uses_oracle = True

    def predict(self, inp, clean=None):
        if clean is None:
            raise ConfigError("oracle-magnitude-mask stage needs the clean reference")
        return oracle_magnitude_mask(inp.mixed_current, clean)


def wiener_gain(mixed, noise_psd, floor: float = WIENER_FLOOR) -> np.ndarray:
    """``max(xi / (1 + xi), floor)`` with ``xi = max(|mixed|^2 / psd - 1, 0)``.

    ``noise_psd`` broadcasts against ``mixed``; a zero PSD yields unit gain.
    """
    power = np.abs(mixed) ** 2
    psd = np.broadcast_to(np.asarray(noise_psd, float), power.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        xi = np.maximum(power / psd - 1.0, 0.0)
        gain = np.where(psd > 0, xi / (1.0 + xi), 1.0)
    gain = np.where(np.isinf(xi), 1.0, gain)
    return np.maximum(gain, floor)


def wiener_stage(mixed_group, noise_psd_estimate, floor: float = WIENER_FLOOR) -> np.ndarray:
    if noise_psd_estimate is None:
        raise ConfigError("Wiener stage needs a noise PSD estimate")
    return np.asarray(mixed_group) * wiener_gain(mixed_group, noise_psd_estimate, floor)


class WienerStage(Stage):
    """Per-cell Wiener gain from a noise PSD of shape ``(coeff, bin)`` (or broadcastable)."""

    kind = "wiener"

    def __init__(self, noise_psd=None, floor: float = WIENER_FLOOR, unity: bool = False):
        self.noise_psd = None if noise_psd is None else np.asarray(noise_psd, float)
        self.floor = floor
        self.unity = unity

    def predict(self, inp, clean=None):
        mixed = inp.mixed_current
        if self.unity:
            return np.array(mixed, dtype=np.complex128, copy=True)
        psd = self.noise_psd
        if psd is not None and psd.ndim == 2:
            psd = psd[:, None, :]
        return wiener_stage(mixed, psd, self.floor)

    def params(self):
        return {"floor": np.array(self.floor)}


class LinearStage(Stage):
    """Per-frequency complex affine map ``y_b = W_b x_b + c_b`` applied frame by frame.

    ``weight`` has shape ``(bin, out_coeff, in_channel)`` and ``bias``
    ``(bin, out_coeff)``; the input channels are all predicted lower-order
    coefficients followed by the mixed coefficients of the current group.
    """

    kind = "linear"
    trainable = True

    def __init__(self, weight, bias=None):
        self.weight = np.array(weight, dtype=np.complex128)
        if self.weight.ndim != 3:
            raise ShapeError("linear stage weight must be (bin, out, in)")
        if bias is None:
            bias = np.zeros(self.weight.shape[:2], dtype=np.complex128)
        self.bias = np.array(bias, dtype=np.complex128)
        if self.bias.shape != self.weight.shape[:2]:
            raise ShapeError(f"bias {self.bias.shape} does not match weight {self.weight.shape}")

    @classmethod
    def identity(cls, n_out: int, n_in: int, n_bins: int) -> "LinearStage":
        """Stage that passes the mixed current group through unchanged."""
        w = np.zeros((n_bins, n_out, n_in), dtype=np.complex128)
        w[:, np.arange(n_out), n_in - n_out + np.arange(n_out)] = 1.0
        return cls(w)

    def apply(self, x) -> np.ndarray:
        """``x`` is ``(in, frame, bin)``; returns ``(out, frame, bin)``."""
        x = np.asarray(x)
        n_bins, n_out, n_in = self.weight.shape
        if x.ndim != 3 or x.shape[0] != n_in or x.shape[2] != n_bins:
            raise ShapeError(f"linear stage expects ({n_in}, frame, {n_bins}) input, got {x.shape}")
        return np.einsum("boi,ifb->ofb", self.weight, x) + self.bias.T[:, None, :]

    def predict(self, inp, clean=None):
        return self.apply(inp.stacked())

    def params(self):
        return {"weight": self.weight, "bias": self.bias}


STAGE_KINDS = {
    "oracle-substitution": OracleSubstitution,
    "oracle-magnitude-mask": OracleMagnitudeMask,
    "wiener": WienerStage,
    "linear": LinearStage,
}


def linear_stage_apply(stage: LinearStage, inp: StageInput) -> np.ndarray:
    return stage.predict(inp)


def run_pipeline(mixed, stages, clean=None, return_groups: bool = False):
    """Run the stages from low to high order.

    Parameters
    ----------
    mixed : ndarray, ``((N+1)**2, frame, bin)``
    stages : sequence of Stage
        One per order group.
    clean : ndarray, optional
        Clean SHCs; only oracle stages read it.
    return_groups : bool
        Also return the list of predicted groups.
    """
    mixed = np.asarray(mixed)
    slices = order_groups(order_from_count(mixed.shape[0]))
    if len(stages) != len(slices):
        raise ShapeError(f"{len(stages)} stages for {len(slices)} order groups")
    if clean is not None and np.shape(clean) != mixed.shape:
        raise ShapeError(f"clean {np.shape(clean)} != mixed {mixed.shape}")
    preds = []
    for sl, stage in zip(slices, stages):
        if stage.uses_oracle and clean is None:
            raise ConfigError(f"{stage.kind} stage needs the clean reference")
        inp = StageInput(preds[:], mixed[sl])
        out = stage.predict(inp, None if clean is None else clean[sl])
        if out.shape != mixed[sl].shape:
            raise ShapeError(f"{stage.kind} stage produced {out.shape}, expected {mixed[sl].shape}")
        preds.append(out)
    merged = merge_groups(preds)
    return (merged, preds) if return_groups else merged


# ---------------------------------------------------------------------------
# loss

@dataclass
class LossBreakdown:
    parts: list
    total: float

    def to_dict(self):
        return {"parts": list(self.parts), "total": self.total}


def group_mse(pred, clean) -> float:
    pred, clean = np.asarray(pred), np.asarray(clean)
    if pred.shape != clean.shape:
        raise ShapeError(f"prediction {pred.shape} and target {clean.shape} differ")
    d = pred - clean
    return float(np.mean(d.real ** 2 + d.imag ** 2))


def loss_total(pred_groups, clean_groups, weights=None) -> LossBreakdown:
    """Per-group MSE and their (weighted) sum."""
    if len(pred_groups) != len(clean_groups):
        raise ShapeError(f"{len(pred_groups)} predicted groups vs {len(clean_groups)} clean groups")
    parts = [group_mse(p, c) for p, c in zip(pred_groups, clean_groups)]
    w = [1.0] * len(parts) if weights is None else list(weights)
    if len(w) != len(parts):
        raise ShapeError("one loss weight per group required")
    total = 0.0
    for wi, p in zip(w, parts):
        total += wi * p
    return LossBreakdown(parts, total)


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    epochs: int = 60
    patience: int = 2
    seed: int = 0
    teacher_forcing: bool = True
    mode: str = "joint"
    group_weights: list | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("learning rate must be non-negative")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.mode not in ("joint", "sequential"):
            raise ConfigError(f"unknown training mode {self.mode!r}")


@dataclass
class EpochRecord:
    epoch: int
    stage: int | None
    lr: float
    train: LossBreakdown
    val_total: float

    def to_dict(self):
        return {"epoch": self.epoch, "stage": self.stage, "lr": self.lr,
                "train": self.train.to_dict(), "val_total": self.val_total}


@dataclass
class TrainResult:
    stages: list
    history: list = field(default_factory=list)


def _stage_inputs(stages, mixed_groups, clean_groups, teacher_forcing):
    preds, inputs = [], []
    for g, stage in enumerate(stages):
        lower = clean_groups[:g] if teacher_forcing else preds[:g]
        x = np.concatenate(list(lower) + [mixed_groups[g]], axis=0)
        inputs.append(x)
        preds.append(stage.apply(x))
    return inputs, preds


def stage_gradients(stages, mixed_groups, clean_groups, weights=None, teacher_forcing=True):
    """Loss breakdown and gradients of the weighted group-MSE sum.

    Gradients are returned as ``dL/dRe + 1j dL/dIm`` for every weight and
    bias. Under teacher forcing the inputs of each stage are constants, so
    stage ``g`` only receives the gradient of its own group loss; when free
    running, upstream stages also receive the gradient flowing back through
    the downstream stages' inputs.
    """
    inputs, preds = _stage_inputs(stages, mixed_groups, clean_groups, teacher_forcing)
    loss = loss_total(preds, clean_groups, weights)
    w = [1.0] * len(stages) if weights is None else list(weights)
    g_out = [2.0 * wi / p.size * (p - c) for wi, p, c in zip(w, preds, clean_groups)]
    sizes = [grp.shape[0] for grp in mixed_groups]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    grads = [None] * len(stages)
    for g in range(len(stages) - 1, -1, -1):
        x, gy = inputs[g], g_out[g]
        grads[g] = (np.einsum("ofb,ifb->boi", gy, np.conj(x)), gy.sum(axis=1).T)
        if not teacher_forcing and g > 0:
            gx = np.einsum("boi,ofb->ifb", np.conj(stages[g].weight), gy)
            for h in range(g):
                g_out[h] = g_out[h] + gx[offsets[h]:offsets[h + 1]]
    return loss, grads


class _Optimizer:
    def __init__(self, cfg: TrainConfig, n_params: int):
        self.cfg = cfg
        self.lr = cfg.lr
        self.t = 0
        self.m = [None] * n_params
        self.v = [None] * n_params

    def step(self, params, grads, active):
        self.t += 1
        c = self.cfg
        for i, (p, g) in enumerate(zip(params, grads)):
            if not active[i]:
                continue
            pr, gr = p.view(np.float64), np.ascontiguousarray(g).view(np.float64)
            if c.optimizer == "sgd":
                pr -= self.lr * gr
                continue
            if self.m[i] is None:
                self.m[i] = np.zeros_like(gr)
                self.v[i] = np.zeros_like(gr)
            self.m[i] = c.beta1 * self.m[i] + (1 - c.beta1) * gr
            self.v[i] = c.beta2 * self.v[i] + (1 - c.beta2) * gr * gr
            mhat = self.m[i] / (1 - c.beta1 ** self.t)
            vhat = self.v[i] / (1 - c.beta2 ** self.t)
            pr -= self.lr * mhat / (np.sqrt(vhat) + c.adam_eps)


def _split(item, slices):
    mixed, clean = (np.asarray(a) for a in item)
    if mixed.shape != clean.shape:
        raise ShapeError(f"mixed {mixed.shape} and clean {clean.shape} differ")
    return [mixed[s] for s in slices], [clean[s] for s in slices]


def init_linear_stages(order: int, n_bins: int) -> list:
    stages = []
    for sl in order_groups(order):
        stages.append(LinearStage.identity(sl.stop - sl.start, sl.stop, n_bins))
    return stages


def evaluate_stages(stages, dataset, weights=None, teacher_forcing=False) -> LossBreakdown:
    """Mean loss breakdown over ``(mixed, clean)`` pairs."""
    if not dataset:
        raise ConfigError("empty dataset")
    slices = order_groups(order_from_count(np.shape(dataset[0][0])[0]))
    acc = None
    for item in dataset:
        mg, cg = _split(item, slices)
        _, preds = _stage_inputs(stages, mg, cg, teacher_forcing)
        lb = loss_total(preds, cg, weights)
        acc = lb.parts if acc is None else [a + b for a, b in zip(acc, lb.parts)]
    parts = [a / len(dataset) for a in acc]
    w = [1.0] * len(parts) if weights is None else list(weights)
    total = 0.0
    for wi, p in zip(w, parts):
        total += wi * p
    return LossBreakdown(parts, total)


def train_stages(dataset, cfg: TrainConfig = TrainConfig(), stages=None,
                 validation=None) -> TrainResult:
    """Fit linear stages to minimize the summed group MSE.

    One optimizer step per ``(mixed, clean)`` pair, pairs visited in a seeded
    random order each epoch. The learning rate halves whenever the monitored
    loss (validation set, or the training set when none is given; always
    free-running) fails to improve for ``cfg.patience`` consecutive epochs.
    ``cfg.mode="sequential"`` fits stage 1 to completion, then stage 2, and
    so on; ``"joint"`` updates all stages together.
    """
    if not dataset:
        raise ConfigError("empty dataset")
    order = order_from_count(np.shape(dataset[0][0])[0])
    slices = order_groups(order)
    n_bins = np.shape(dataset[0][0])[-1]
    if stages is None:
        stages = init_linear_stages(order, n_bins)
    if len(stages) != len(slices):
        raise ShapeError(f"{len(stages)} stages for {len(slices)} order groups")
    for s in stages:
        if not s.trainable:
            raise ConfigError(f"{s.kind} stages are not trainable")
    split = [_split(item, slices) for item in dataset]
    monitor = validation if validation else dataset
    rng = np.random.default_rng(cfg.seed)
    params = [p for s in stages for p in (s.weight, s.bias)]
    history = []

    phases = [None] if cfg.mode == "joint" else list(range(len(stages)))
    for phase in phases:
        opt = _Optimizer(cfg, len(params))
        active = [phase is None or i // 2 == phase for i in range(len(params))]
        best, stall = math.inf, 0
        for epoch in range(cfg.epochs):
            for j in rng.permutation(len(split)):
                mg, cg = split[j]
                _, grads = stage_gradients(stages, mg, cg, cfg.group_weights, cfg.teacher_forcing)
                opt.step(params, [a for pair in grads for a in pair], active)
            train_loss = evaluate_stages(stages, dataset, cfg.group_weights, cfg.teacher_forcing)
            val = evaluate_stages(stages, monitor, cfg.group_weights, teacher_forcing=False)
            val_total = val.total if phase is None else val.parts[phase]
            history.append(EpochRecord(epoch, phase, opt.lr, train_loss, val_total))
            if val_total < best:
                best, stall = val_total, 0
            else:
                stall += 1
                if stall >= cfg.patience:
                    opt.lr *= 0.5
                    stall = 0
    return TrainResult(stages, history)


def grad_check(stage: LinearStage, inp: StageInput, target, epsilon: float = 1e-6,
               n_params: int = 50, seed: int = 0, scale: float = 1.0) -> float:
    """Largest relative error between analytic and central-difference gradients.

    The checked loss is ``scale * mean|stage(inp) - target|^2``; ``n_params``
    weight/bias entries are drawn at random and their real and imaginary
    parts perturbed separately.
    """
    x = inp.stacked()
    target = np.asarray(target)
    pred = stage.apply(x)
    gy = 2.0 * scale / pred.size * (pred - target)
    analytic = {"weight": np.einsum("ofb,ifb->boi", gy, np.conj(x)), "bias": gy.sum(axis=1).T}

    # finite differences in extended precision so rounding noise in the
    # loss stays far below the gradient resolution at epsilon=1e-6
    ld = np.clongdouble
    x_ld, t_ld = x.astype(ld), target.astype(ld)
    arrays = {"weight": stage.weight.astype(ld), "bias": stage.bias.astype(ld)}

    def loss():
        y = np.einsum("boi,ifb->ofb", arrays["weight"], x_ld) + arrays["bias"].T[:, None, :]
        d = y - t_ld
        return scale * np.sum(d.real ** 2 + d.imag ** 2) / d.size

    rng = np.random.default_rng(seed)
    eps = np.longdouble(epsilon)
    worst = 0.0
    for _ in range(n_params):
        name = "weight" if rng.random() < 0.8 else "bias"
        arr = arrays[name]
        idx = tuple(int(rng.integers(s)) for s in arr.shape)
        for part, unit in (("real", 1.0), ("imag", 1j)):
            orig = arr[idx]
            arr[idx] = orig + eps * unit
            up = loss()
            arr[idx] = orig - eps * unit
            down = loss()
            arr[idx] = orig
            fd = float((up - down) / (2 * eps))
            a = float(getattr(analytic[name][idx], part))
            denom = max(abs(a), abs(fd), 1e-12)
            worst = max(worst, abs(a - fd) / denom)
    return worst


# ---------------------------------------------------------------------------
# SHC -> audio

def shc_to_waveform(shc, geom, ref_mic: int, stft_cfg: StftConfig = StftConfig(),
                    length: int | None = None) -> np.ndarray:
    """Evaluate the SHC expansion at the reference mic direction and resynthesize."""
    spec = sht_inverse(shc, geom.theta[ref_mic], geom.phi[ref_mic])[0]
    return istft(spec, stft_cfg, length)


def estimate_noise_psd(mixed_shc, n_frames: int) -> np.ndarray:
    """Mean power of the first ``n_frames`` frames, shape ``(coeff, bin)``."""
    if n_frames < 1:
        raise ConfigError("noise PSD estimate needs at least one noise-only frame")
    seg = np.asarray(mixed_shc)[:, :n_frames]
    return np.mean(seg.real ** 2 + seg.imag ** 2, axis=1)


def make_stages(kind: str, order: int, noise_psd=None, model=None) -> list:
    """Stage list for one estimator kind over all order groups."""
    slices = order_groups(order)
    if kind in ("oracle-sub", "oracle-substitution"):
        return [OracleSubstitution() for _ in slices]
    if kind in ("oracle-mag", "oracle-magnitude-mask"):
        return [OracleMagnitudeMask() for _ in slices]
    if kind == "wiener":
        if noise_psd is None:
            raise ConfigError("Wiener estimator needs a noise PSD")
        return [WienerStage(np.asarray(noise_psd)[s]) for s in slices]
    if kind == "linear":
        if model is None:
            raise ConfigError("linear estimator needs a trained model")
        if len(model) != len(slices):
            raise ConfigError(f"model has {len(model)} stages, order {order} needs {len(slices)}")
        return list(model)
    raise ConfigError(f"unknown estimator {kind!r}")
