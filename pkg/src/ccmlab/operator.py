"""Compact Fourier neural operator with a hand-written backward pass.

Architecture (one autoregressive step)::

    x  = (u - in_mean) / in_std
    h  = x @ lift.w + lift.b
    h  = act(spectral_l(h) + h @ layer_l.w + layer_l.b)   for each layer
    y  = h @ proj.w + proj.b
    u' = u + out_std * y

The activation is skipped after the last spectral layer. With every learned
tensor zero the step is the identity map. ``in_mean``, ``in_std`` and
``out_std`` form the normalizer; they are fitted on support data and kept
out of the learnable weights.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.fft as sfft

from .weights import SchemaMismatch, WeightSet

_GELU_C = np.sqrt(2.0 / np.pi)


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class OperatorConfig:
    width: int = 16
    modes: int = 8
    layers: int = 3
    channels: int = 1
    grid: int = 32
    lr: float = 1e-3
    steps: int = 1000
    batch_size: int = 16
    seed: int = 0
    rollout_steps: int = 1  # 1 = one-step teacher forcing
    eval_every: int = 50
    finetune_lr: float = 1e-4
    finetune_steps: int = 300
    activation: str = "gelu-tanh"
    schedule: str = "cosine"  # or "constant"

    def __post_init__(self):
        if self.width < 1 or self.layers < 1:
            raise ValueError("width and layers must be >= 1")
        if self.modes < 1 or self.modes > self.grid // 2:
            raise ValueError(f"modes={self.modes} exceeds the Nyquist limit {self.grid // 2}")
        if self.rollout_steps < 1:
            raise ValueError("rollout_steps must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class Normalizer:
    in_mean: np.ndarray
    in_std: np.ndarray
    out_std: np.ndarray

    @classmethod
    def identity(cls, channels: int) -> "Normalizer":
        return cls(np.zeros(channels), np.ones(channels), np.ones(channels))

    @classmethod
    def fit(cls, trajectories) -> "Normalizer":
        """Per-channel statistics of states and one-step increments."""
        arr = np.concatenate([np.asarray(t, dtype=np.float64) for t in trajectories], axis=0)
        inc = np.concatenate([np.diff(np.asarray(t, dtype=np.float64), axis=0) for t in trajectories], axis=0)
        C = arr.shape[-1]
        mean = arr.reshape(-1, C).mean(axis=0)
        std = arr.reshape(-1, C).std(axis=0)
        out = np.sqrt((inc.reshape(-1, C) ** 2).mean(axis=0))
        std = np.where(std > 1e-12, std, 1.0)
        out = np.where(out > 1e-12, out, 1.0)
        return cls(mean, std, out)

    def as_buffers(self) -> dict:
        return {"norm.in_mean": self.in_mean, "norm.in_std": self.in_std, "norm.out_std": self.out_std}

    @classmethod
    def from_buffers(cls, b) -> "Normalizer":
        return cls(np.asarray(b["norm.in_mean"]), np.asarray(b["norm.in_std"]), np.asarray(b["norm.out_std"]))


def param_shapes(cfg: OperatorConfig) -> dict:
    w, m, C = cfg.width, cfg.modes, cfg.channels
    shapes = {"lift.w": (C, w), "lift.b": (w,), "proj.w": (w, C), "proj.b": (C,)}
    for l in range(cfg.layers):
        shapes[f"layer{l}.spectral_re"] = (2, m, m, w, w)
        shapes[f"layer{l}.spectral_im"] = (2, m, m, w, w)
        shapes[f"layer{l}.w"] = (w, w)
        shapes[f"layer{l}.b"] = (w,)
    return shapes


def init_weights(cfg: OperatorConfig, seed: int | None = None) -> WeightSet:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    w = cfg.width
    out = {}
    for name, shape in sorted(param_shapes(cfg).items()):
        if name.endswith(".b"):
            out[name] = np.zeros(shape)
        elif "spectral" in name:
            out[name] = rng.uniform(-1.0, 1.0, shape) / (w * w)
        elif name == "proj.w":
            out[name] = rng.standard_normal(shape) * (0.1 / np.sqrt(w))
        else:
            out[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
    return WeightSet(out)


def zero_weights(cfg: OperatorConfig) -> WeightSet:
    return WeightSet({k: np.zeros(s) for k, s in param_shapes(cfg).items()})


def check_schema(theta: WeightSet, cfg: OperatorConfig):
    want = {k: tuple(v) for k, v in param_shapes(cfg).items()}
    have = dict(theta.schema)
    if want != have:
        raise SchemaMismatch("weights do not match the operator configuration")


def _gelu(z):
    t = np.tanh(_GELU_C * (z + 0.044715 * z * z * z))
    return 0.5 * z * (1.0 + t), t


def _gelu_grad(z, t):
    return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * z * z)


# --------------------------------------------------------------------------
# spectral convolution


def _modes_forward(h, m):
    """Half-spectrum coefficients of ``h`` restricted to the first ``m`` columns."""
    return sfft.fft(sfft.rfft(h, axis=2)[:, :, :m, :], axis=1)


def _modes_inverse(coeffs, W):
    """``irfft2`` of a half spectrum whose nonzero columns are ``coeffs``."""
    return sfft.irfft(sfft.ifft(coeffs, axis=1), n=W, axis=2)


def _spectral_forward(h, wre, wim, m):
    B, H, W, _ = h.shape
    Xh = _modes_forward(h, m)                          # (B, H, m, in)
    Wc = wre + 1j * wim  # (2, m, m, in, out)
    top = Xh[:, :m].transpose(1, 2, 0, 3)              # (m, m, B, in)
    bot = Xh[:, H - m:].transpose(1, 2, 0, 3)
    out = np.zeros((B, H, m, Wc.shape[-1]), dtype=complex)
    out[:, :m] = (top @ Wc[0]).transpose(2, 0, 1, 3)
    out[:, H - m:] = (bot @ Wc[1]).transpose(2, 0, 1, 3)
    return _modes_inverse(out, W), (top, bot, Wc)


def _spectral_backward(gy, cache, m):
    top, bot, Wc = cache
    B, H, W, _ = gy.shape
    # adjoint of irfft2: rfft2(gy)/(HW), doubled on columns that stand for
    # a conjugate pair (all kept columns except the zero column)
    colw = np.full(m, 2.0)
    colw[0] = 1.0
    G = _modes_forward(gy, m) * (colw[None, None, :, None] / (H * W))
    g_top = G[:, :m].transpose(1, 2, 0, 3)             # (m, m, B, out)
    g_bot = G[:, H - m:].transpose(1, 2, 0, 3)
    gW = np.stack([np.conj(top).swapaxes(-1, -2) @ g_top,
                   np.conj(bot).swapaxes(-1, -2) @ g_bot])   # (2, m, m, in, out)
    # adjoint of rfft2: Re(sum_k g_k e^{+ikx}) over the kept half spectrum,
    # evaluated as an inverse real transform with the zero column doubled
    gX = np.zeros((B, H, m, Wc.shape[-2]), dtype=complex)
    gX[:, :m] = (g_top @ np.conj(Wc[0]).swapaxes(-1, -2)).transpose(2, 0, 1, 3)
    gX[:, H - m:] = (g_bot @ np.conj(Wc[1]).swapaxes(-1, -2)).transpose(2, 0, 1, 3)
    gX[:, :, 0, :] *= 2.0
    gh = _modes_inverse(gX, W) * (0.5 * H * W)
    return gh, gW.real, gW.imag


# --------------------------------------------------------------------------
# forward / backward


def _outer(a, b):
    """``sum_{b,h,w} a[..., i] b[..., o]`` for pointwise-linear weight grads."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


class FNO:
    """Stateless evaluator binding a configuration to a normalizer."""

    def __init__(self, cfg: OperatorConfig, normalizer: Normalizer | None = None):
        self.cfg = cfg
        self.norm = normalizer or Normalizer.identity(cfg.channels)

    def _forward(self, theta: WeightSet, u: np.ndarray, keep: bool):
        cfg, nz = self.cfg, self.norm
        m = cfg.modes
        x = (u - nz.in_mean) / nz.in_std
        h = x @ theta["lift.w"] + theta["lift.b"]
        caches = []
        for l in range(cfg.layers):
            s, sc = _spectral_forward(h, theta[f"layer{l}.spectral_re"], theta[f"layer{l}.spectral_im"], m)
            z = s + h @ theta[f"layer{l}.w"] + theta[f"layer{l}.b"]
            last = l == cfg.layers - 1
            if last:
                hn, t = z, None
            else:
                hn, t = _gelu(z)
            if not np.all(np.isfinite(hn)):
                raise NonFiniteError(f"non-finite activation in layer{l}")
            if keep:
                caches.append((h, sc, z, t))
            h = hn
        y = h @ theta["proj.w"] + theta["proj.b"]
        out = u + nz.out_std * y
        return out, (x, caches, h) if keep else None

    def step(self, theta: WeightSet, u: np.ndarray) -> np.ndarray:
        """One step for a single ``(H, W, C)`` state or a batch ``(B, H, W, C)``."""
        single = u.ndim == 3
        ub = u[None] if single else u
        out, _ = self._forward(theta, ub, keep=False)
        return out[0] if single else out

    def _backward(self, theta: WeightSet, cache, g_out):
        """Gradients w.r.t. weights and the input state given dL/du'."""
        cfg, nz = self.cfg, self.norm
        m = cfg.modes
        x, caches, hL = cache
        grads = {}
        gy = g_out * nz.out_std
        grads["proj.w"] = _outer(hL, gy)
        grads["proj.b"] = gy.sum(axis=(0, 1, 2))
        gh = gy @ theta["proj.w"].T
        for l in reversed(range(cfg.layers)):
            h, sc, z, t = caches[l]
            gz = gh if t is None else gh * _gelu_grad(z, t)
            grads[f"layer{l}.w"] = _outer(h, gz)
            grads[f"layer{l}.b"] = gz.sum(axis=(0, 1, 2))
            gs_h, gre, gim = _spectral_backward(gz, sc, m)
            grads[f"layer{l}.spectral_re"] = gre
            grads[f"layer{l}.spectral_im"] = gim
            gh = gs_h + gz @ theta[f"layer{l}.w"].T
        grads["lift.w"] = _outer(x, gh)
        grads["lift.b"] = gh.sum(axis=(0, 1, 2))
        g_u = g_out + (gh @ theta["lift.w"].T) / nz.in_std
        return grads, g_u

    def loss_and_grad(self, theta: WeightSet, inputs: np.ndarray, targets: np.ndarray):
        """Mean squared normalized error of an unrolled prediction.

        ``inputs``: ``(B, H, W, C)`` start states; ``targets``: ``(B, R, H, W, C)``
        true next states for ``R`` unrolled steps (``R = 1`` is plain
        teacher-forced one-step training). The error at each step is scaled by
        the increment scale ``out_std``.
        """
        if inputs.shape[0] == 0:
            raise ValueError("empty batch")
        check_schema(theta, self.cfg)
        if targets.ndim == inputs.ndim:
            targets = targets[:, None]
        R = targets.shape[1]
        n = targets[:, 0].size * R
        u = inputs
        caches, resid = [], []
        loss = 0.0
        for r in range(R):
            out, cache = self._forward(theta, u, keep=True)
            e = (out - targets[:, r]) / self.norm.out_std
            loss += float(np.sum(e**2))
            caches.append(cache)
            resid.append(e)
            u = out
        loss /= n
        total = {k: np.zeros_like(v) for k, v in theta.items()}
        g_u = np.zeros_like(inputs)
        for r in reversed(range(R)):
            g_out = g_u + 2.0 * resid[r] / self.norm.out_std / n
            grads, g_u = self._backward(theta, caches[r], g_out)
            for k in total:
                total[k] += grads[k]
        return loss, WeightSet(total)

    def rollout(self, theta: WeightSet, u0: np.ndarray, T: int) -> "RolloutResult":
        """Autoregressive prediction of frames ``1..T`` from ``u0``.

        ``u0`` may be one state ``(H, W, C)`` or a batch ``(B, H, W, C)``;
        the frames come back stacked on a new axis right after the batch.
        """
        check_schema(theta, self.cfg)
        single = u0.ndim == 3
        u = u0[None] if single else u0
        if u.shape[1] != self.cfg.grid or u.shape[2] != self.cfg.grid or u.shape[3] != self.cfg.channels:
            raise SchemaMismatch(f"state shape {u.shape[1:]} does not match the operator grid")
        frames, norms = [], []
        for t in range(1, T + 1):
            try:
                u, _ = self._forward(theta, u, keep=False)
            except NonFiniteError as exc:
                raise NonFiniteError(f"rollout step {t}: {exc}") from None
            frames.append(u)
            norms.append(np.sqrt(np.mean(u**2, axis=(1, 2, 3))))
        pred = np.stack(frames, axis=1)
        norms = np.stack(norms, axis=1)
        if single:
            pred, norms = pred[0], norms[0]
        return RolloutResult(pred, norms)


@dataclass(frozen=True)
class RolloutResult:
    frames: np.ndarray   # (T, H, W, C) or (B, T, H, W, C)
    step_norms: np.ndarray


# --------------------------------------------------------------------------
# training


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)     # (step, loss, lr)
    wall: list = field(default_factory=list)     # seconds since start, per row
    best_step: int = 0
    best_loss: float = float("inf")

    def to_csv(self, path):
        with open(path, "w") as f:
            f.write("step,loss,lr\n")
            for s, l, lr in self.rows:
                f.write(f"{s},{l:.17g},{lr:.17g}\n")

    def timing_csv(self, path):
        with open(path, "w") as f:
            f.write("step,wall_time\n")
            for (s, _, _), w in zip(self.rows, self.wall):
                f.write(f"{s},{w:.6f}\n")


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def update(self, theta: WeightSet, grad: WeightSet) -> WeightSet:
        if self.m is None:
            self.m = {k: np.zeros_like(v) for k, v in theta.items()}
            self.v = {k: np.zeros_like(v) for k, v in theta.items()}
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        new = {}
        for k, p in theta.items():
            g = grad[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            new[k] = p - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return WeightSet(new)


class PairSampler:
    """Seeded sampler of ``(u_t, u_{t+1..t+R})`` windows from trajectories."""

    def __init__(self, trajectories, rollout_steps: int, seed: int):
        self.trajs = [np.asarray(t, dtype=np.float64) for t in trajectories]
        if not self.trajs:
            raise ValueError("no trajectories to train on")
        self.R = rollout_steps
        self.index = [(i, t) for i, tr in enumerate(self.trajs) for t in range(tr.shape[0] - rollout_steps)]
        self.rng = np.random.default_rng(seed)

    def batch(self, size: int, rng=None):
        rng = rng or self.rng
        pick = rng.integers(0, len(self.index), size=size)
        xs, ys = [], []
        for p in pick:
            i, t = self.index[p]
            xs.append(self.trajs[i][t])
            ys.append(self.trajs[i][t + 1:t + 1 + self.R])
        return np.stack(xs), np.stack(ys)


def _optimize(model: FNO, theta: WeightSet, trajectories, lr, steps, batch_size, seed,
              rollout_steps, eval_every, schedule="constant"):
    sampler = PairSampler(trajectories, rollout_steps, seed)
    monitor_x, monitor_y = sampler.batch(max(batch_size, 32), rng=np.random.default_rng(seed + 7919))
    opt = Adam(lr)
    log = TrainLog()
    t0 = time.perf_counter()

    def monitor(th):
        out = model.step(th, monitor_x)
        e = (out - monitor_y[:, 0]) / model.norm.out_std
        return float(np.mean(e**2))

    best, best_loss = theta, monitor(theta)
    log.best_loss = best_loss
    log.rows.append((0, best_loss, lr))
    log.wall.append(0.0)
    for step in range(1, steps + 1):
        if schedule == "cosine":
            opt.lr = 0.5 * lr * (1.0 + np.cos(np.pi * (step - 1) / steps))
        x, y = sampler.batch(batch_size)
        loss, grad = model.loss_and_grad(theta, x, y)
        if not np.isfinite(loss):
            raise NonFiniteError(f"non-finite training loss at step {step}")
        theta = opt.update(theta, grad)
        if step % eval_every == 0 or step == steps:
            ml = monitor(theta)
            log.rows.append((step, ml, opt.lr))
            log.wall.append(time.perf_counter() - t0)
            if ml < best_loss:
                best, best_loss = theta, ml
                log.best_step, log.best_loss = step, ml
    return best, log


def train_anchor(cfg: OperatorConfig, support_trajectories, normalizer: Normalizer | None = None):
    """Adam training of the family anchor from a seeded initialization.

    Returns ``(weights, normalizer, log)``; the weights are the best ones
    seen on a fixed monitor batch of one-step pairs.
    """
    trajs = [np.asarray(t) for t in support_trajectories]
    if not trajs:
        raise ValueError("need at least one support trajectory")
    norm = normalizer or Normalizer.fit(trajs)
    model = FNO(cfg, norm)
    theta = init_weights(cfg)
    best, log = _optimize(model, theta, trajs, cfg.lr, cfg.steps, cfg.batch_size, cfg.seed,
                          cfg.rollout_steps, cfg.eval_every, cfg.schedule)
    return best, norm, log


def finetune_endpoint(anchor: WeightSet, cfg: OperatorConfig, normalizer: Normalizer, endpoint_trajectories):
    """Continue training from the anchor on one endpoint regime.

    Uses the (smaller) fine-tuning learning rate and the same sampling seed
    for every endpoint, so two experts see identical batch schedules.
    """
    check_schema(anchor, cfg)
    model = FNO(cfg, normalizer)
    best, log = _optimize(model, anchor, endpoint_trajectories, cfg.finetune_lr, cfg.finetune_steps,
                          cfg.batch_size, cfg.seed + 1, cfg.rollout_steps, cfg.eval_every, cfg.schedule)
    return best, log
