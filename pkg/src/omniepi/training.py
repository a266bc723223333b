"""Losses, Adam, StepLR, EMA, joint light-field augmentation and the training loop."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import dihedral
from .autodiff import ops
from .autodiff.tensor import Tensor, backward, precision
from .errors import ConfigError, ContractError, NumericError, ShapeError
from .metrics import psnr_y
from .model import GTF, ModelConfig, build_model

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 4e-4
    step_size: int = 80
    gamma: float = 0.5
    batch: int = 8
    patch: int = 32
    epochs: int = 180
    steps_per_epoch: int = 100
    ohem_k: float = 0.8
    charbonnier_eps: float = 1e-3
    ema_decay: float = 0.999
    ema_warmup: bool = True
    augment: bool = True
    seed: int = 0
    loss: str = "ohem"

    def __post_init__(self):
        if self.loss not in ("l1", "ohem"):
            raise ConfigError(f"loss must be 'l1' or 'ohem', got {self.loss!r}")
        if not 0.0 < self.ohem_k <= 1.0:
            raise ConfigError(f"ohem_k must lie in (0, 1], got {self.ohem_k}")
        if self.lr <= 0 or self.batch < 1 or self.patch < 1 or self.epochs < 0 or self.steps_per_epoch < 1:
            raise ConfigError("lr, batch, patch and steps_per_epoch must be positive")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError(f"ema_decay must lie in [0, 1], got {self.ema_decay}")


TRAIN_PRESETS = {
    "gtf_tiny": TrainConfig(),
    "gtf": TrainConfig(ohem_k=0.5),
    # test-scale overfit profile: one field, whole-frame patches, 200 steps at a flat rate
    "nano": TrainConfig(lr=4e-3, batch=1, patch=16, epochs=4, steps_per_epoch=50, step_size=1000,
                        augment=False),
}


# -- losses ---------------------------------------------------------------------------

def selected_count(k: float, n: int) -> int:
    """ceil(k * n), computed on the decimal value of k so 0.8 * 10 gives 8, not 9."""
    if not 0.0 < k <= 1.0:
        raise ConfigError(f"OHEM fraction k must lie in (0, 1], got {k}")
    return max(1, math.ceil(Fraction(repr(float(k))) * n))


def charbonnier_ohem(pred: Tensor, target: Tensor, k: float, eps: float = 1e-3) -> Tensor:
    """Mean Charbonnier penalty over the ceil(k*P) largest per-pixel values.

    Ranking is over every pixel of the batch, descending, ties by flat index.
    The selection itself carries no gradient.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"loss operands differ: {pred.shape} vs {target.shape}")
    n = selected_count(k, pred.size)
    diff = pred - target
    per_pixel = ops.sqrt(diff * diff + eps * eps)
    flat = ops.reshape(per_pixel, (-1,))
    if n == pred.size:
        return ops.mean(flat)
    order = np.argsort(-flat.data, kind="stable")[:n]
    return ops.mean(ops.take(flat, np.sort(order), axis=0))


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"loss operands differ: {pred.shape} vs {target.shape}")
    return ops.mean(ops.absolute(pred - target))


def compute_loss(cfg: TrainConfig, pred: Tensor, target: Tensor) -> Tensor:
    if cfg.loss == "l1":
        return l1_loss(pred, target)
    return charbonnier_ohem(pred, target, cfg.ohem_k, cfg.charbonnier_eps)


# -- optimiser state --------------------------------------------------------------------

@dataclass
class TrainState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    ema: dict[str, np.ndarray]
    step: int = 0          # optimisation steps attempted
    adam_t: int = 0        # updates actually applied (drives bias correction)
    epoch: int = 0
    skipped: int = 0
    best_val: float = -math.inf

    @classmethod
    def fresh(cls, params: dict[str, np.ndarray]) -> TrainState:
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()},
                   ema={k: p.copy() for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: TrainState, lr: float,
              betas=ADAM_BETAS, eps: float = ADAM_EPS) -> bool:
    """In-place Adam update with bias correction. A non-finite gradient skips the step."""
    missing = sorted(set(params) - set(grads))
    if missing:
        raise ContractError(f"no gradient for {missing[:5]}")
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        warnings.warn(f"non-finite gradient; skipped update ({state.skipped} so far)", RuntimeWarning)
        return False
    b1, b2 = betas
    state.adam_t += 1
    t = state.adam_t
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    for k, p in params.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return True


def steplr(lr0: float, epoch: int, step_size: int, gamma: float) -> float:
    return lr0 * gamma ** (epoch // step_size)


def ema_update(shadow: dict[str, np.ndarray], params: dict[str, np.ndarray], decay: float) -> None:
    for k, p in params.items():
        s = shadow[k]
        s *= decay
        s += (1 - decay) * p


def ema_decay_at(cfg: TrainConfig, update: int) -> float:
    """Configured decay, ramped up over early updates when warm-up is on."""
    if not cfg.ema_warmup:
        return cfg.ema_decay
    return min(cfg.ema_decay, (1 + update) / (10 + update))


# -- augmentation -------------------------------------------------------------------------

def augment_lf(lr: np.ndarray, hr: np.ndarray, U: int, V: int, rng: np.random.Generator | None = None,
               element: dihedral.Element | None = None):
    """Apply one dihedral element jointly to a paired (B, C, U*V, h, w) LR/HR sample.

    Without an explicit ``element`` one is drawn uniformly (from the four
    non-transposing ones when U != V). Returns (lr, hr, element).
    """
    if lr.shape[:3] != hr.shape[:3]:
        raise ShapeError(f"LR {lr.shape} and HR {hr.shape} angular layouts differ")
    if element is None:
        pool = dihedral.ELEMENTS if U == V else dihedral.NON_TRANSPOSING
        element = pool[int(rng.integers(len(pool)))]
    return dihedral.apply(element, lr, U, V), dihedral.apply(element, hr, U, V), element


# -- data -----------------------------------------------------------------------------------

@dataclass
class PairSet:
    """Paired luminance light fields, each (1, 1, A, h, w) LR and (1, 1, A, scale*h, scale*w) HR."""

    lr: list[np.ndarray]
    hr: list[np.ndarray]
    U: int
    V: int
    scale: int
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.lr) != len(self.hr) or not self.lr:
            raise ShapeError("a pair set needs equally many (>0) LR and HR fields")
        for lo, hi in zip(self.lr, self.hr):
            if hi.shape[-2:] != (lo.shape[-2] * self.scale, lo.shape[-1] * self.scale):
                raise ShapeError(f"HR {hi.shape} is not {self.scale}x LR {lo.shape}")

    def __len__(self):
        return len(self.lr)

    def sample(self, rng: np.random.Generator, batch: int, patch: int, augment: bool, dtype):
        lrs, hrs = [], []
        s = self.scale
        for _ in range(batch):
            i = int(rng.integers(len(self)))
            lo, hi = self.lr[i], self.hr[i]
            h, w = lo.shape[-2:]
            ph, pw = min(patch, h), min(patch, w)
            y, x = int(rng.integers(h - ph + 1)), int(rng.integers(w - pw + 1))
            lo = lo[..., y:y + ph, x:x + pw]
            hi = hi[..., y * s:(y + ph) * s, x * s:(x + pw) * s]
            if augment:
                lo, hi, _ = augment_lf(lo, hi, self.U, self.V, rng)
            lrs.append(lo)
            hrs.append(hi)
        return np.concatenate(lrs).astype(dtype), np.concatenate(hrs).astype(dtype)


# -- loop -------------------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: GTF
    state: TrainState
    history: list[dict]
    ema: dict[str, np.ndarray]


def evaluate(model: GTF, weights: dict[str, np.ndarray], data: PairSet) -> float:
    """Mean Y PSNR of ``weights`` on the pair set (predictions clamped to [0, 1])."""
    saved = model.state_dict()
    model.load_state_dict(weights)
    try:
        scores = []
        for lo, hi in zip(data.lr, data.hr):
            sr = np.clip(model.predict_y(lo.astype(model.dtype)), 0.0, 1.0)
            scores.append(psnr_y(sr.astype(np.float64), hi.astype(np.float64))[1])
    finally:
        model.load_state_dict(saved)
    return float(np.mean(scores))


def _format_log(row: dict) -> str:
    val = "" if row["val_psnr"] is None else f"{row['val_psnr']:.6f}"
    return f"{row['step']},{row['epoch']},{row['lr']:.6g},{row['loss']:.9g},{val}"


def _to_checkpoint(model: GTF, mcfg, tcfg, state: TrainState, params) -> ckpt.Checkpoint:
    extra = {"epoch": str(state.epoch), "adam_t": str(state.adam_t), "skipped": str(state.skipped),
             "best_val": repr(state.best_val)}
    return ckpt.Checkpoint(mcfg, {k: v.copy() for k, v in params.items()},
                           {k: v.copy() for k, v in state.ema.items()}, state.step, tcfg, extra,
                           {k: v.copy() for k, v in state.m.items()}, {k: v.copy() for k, v in state.v.items()})


def train_loop(mcfg: ModelConfig, tcfg: TrainConfig, train: PairSet, val: PairSet | None = None,
               out_dir=None, resume=None, max_steps: int | None = None, dtype=np.float32) -> TrainResult:
    """Train ``mcfg`` on ``train``; validate (EMA weights) after every epoch.

    With ``out_dir``, appends ``metrics.log`` and writes ``last.ckpt`` each epoch
    plus ``best.ckpt`` when the EMA validation PSNR improves. A non-finite loss
    aborts the run, restoring the model to the last good checkpoint.
    """
    if (train.U, train.V, train.scale) != (mcfg.U, mcfg.V, mcfg.scale):
        raise ConfigError(f"data {train.U}x{train.V} x{train.scale} does not match model "
                          f"{mcfg.U}x{mcfg.V} x{mcfg.scale}")
    mode = "f64" if np.dtype(dtype) == np.float64 else "f32"
    with precision(mode):
        model = build_model(mcfg, dtype)
        named = dict(model.named_parameters())
        params = {k: p.data for k, p in named.items()}
        if resume is not None:
            c = resume if isinstance(resume, ckpt.Checkpoint) else ckpt.load(resume, TrainConfig)
            c.check_against({k: p.shape for k, p in named.items()})
            model.load_state_dict(c.params)
            params = {k: p.data for k, p in named.items()}
            state = TrainState(m={k: v.astype(dtype) for k, v in c.adam_m.items()},
                               v={k: v.astype(dtype) for k, v in c.adam_v.items()},
                               ema={k: v.astype(dtype) for k, v in c.ema.items()},
                               step=c.step, adam_t=int(c.state.get("adam_t", c.step)),
                               epoch=int(c.state.get("epoch", 0)), skipped=int(c.state.get("skipped", 0)),
                               best_val=float(c.state.get("best_val", "-inf")))
        else:
            state = TrainState.fresh(params)

        out = Path(out_dir) if out_dir is not None else None
        logfh = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            logfh = open(out / "metrics.log", "a")
            if resume is None:
                logfh.write("step,epoch,lr,loss,val_psnr\n")
        last_good = _to_checkpoint(model, mcfg, tcfg, state, params)
        history = []
        total = tcfg.epochs * tcfg.steps_per_epoch
        if max_steps is not None:
            total = min(total, max_steps)
        try:
            while state.step < total:
                epoch = state.step // tcfg.steps_per_epoch
                state.epoch = epoch
                lr = steplr(tcfg.lr, epoch, tcfg.step_size, tcfg.gamma)
                rng = np.random.default_rng([tcfg.seed, state.step])
                lo, hi = train.sample(rng, tcfg.batch, tcfg.patch, tcfg.augment, dtype)
                model.train()
                model.zero_grad()
                pred = model.forward_y(Tensor(lo, dtype=dtype), rng)
                loss = compute_loss(tcfg, pred, Tensor(hi, dtype=dtype))
                value = float(loss.data)
                if not math.isfinite(value):
                    model.load_state_dict(last_good.params)
                    raise NumericError(f"non-finite loss at step {state.step}; model restored to the "
                                       f"checkpoint of step {last_good.step}")
                backward(loss, params=named.values())
                grads = {k: p.grad for k, p in named.items()}
                if adam_step(params, grads, state, lr):
                    ema_update(state.ema, params, ema_decay_at(tcfg, state.adam_t - 1))
                state.step += 1
                row = {"step": state.step, "epoch": epoch, "lr": lr, "loss": value, "val_psnr": None}
                end_of_epoch = state.step % tcfg.steps_per_epoch == 0 or state.step == total
                if end_of_epoch:
                    model.eval()
                    if val is not None:
                        row["val_psnr"] = evaluate(model, state.ema, val)
                    state.epoch = epoch + (state.step % tcfg.steps_per_epoch == 0)
                    last_good = _to_checkpoint(model, mcfg, tcfg, state, params)
                    if out is not None:
                        ckpt.save(out / "last.ckpt", last_good)
                        if row["val_psnr"] is not None and row["val_psnr"] > state.best_val:
                            state.best_val = row["val_psnr"]
                            ckpt.save(out / "best.ckpt", _to_checkpoint(model, mcfg, tcfg, state, params))
                history.append(row)
                if logfh is not None:
                    logfh.write(_format_log(row) + "\n")
                    logfh.flush()
        finally:
            if logfh is not None:
                logfh.close()
        model.eval()
    return TrainResult(model, state, history, state.ema)
