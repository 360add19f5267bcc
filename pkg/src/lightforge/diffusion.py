"""Flow-matching training machinery at desk scale.

Timesteps run from t=0 (pure noise) to t=1 (clean signal); the biased sampler
puts most of its mass on the noisy end, where relighting actually has to
invent structure. The model here is deliberately tiny: a per-pixel MLP that
sees one noised target pixel plus its aligned input/condition pixels, the
normalized pixel location, a Fourier timestep embedding, and the sun
embedding. It exists to exercise the sampler, the noising algebra, and the
optimizer -- it is a harness, not a relighting method, and nothing about its
outputs should be read as image quality.

All gradients are written out by hand (reverse mode through the fixed
three-layer architecture) so they can be checked against finite differences
without an autograd dependency.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng as crng
from .conditioning import SunMlp, fourier_features, init_sun_mlp, sun_embedding

# stream tags for counter-rng draws inside train_toy
_S_BATCH = 101
_S_COIN = 103
_S_T = 104
_S_NOISE = 105
_VAL_SPLIT_SEED = 0x5A17
_VAL_T_GRID = (0.1, 0.3, 0.5, 0.7, 0.9)


class FlowError(ValueError):
    """Raised when training inputs or activations go bad."""


# --- timestep sampling --------------------------------------------------------

@dataclass(frozen=True)
class TimestepDistribution:
    """Piecewise-uniform density: mass rho on [0, tau], the rest on (tau, 1]."""

    tau: float = 0.4
    rho: float = 0.85

    def __post_init__(self):
        if not (0.0 < self.tau < 1.0):
            raise FlowError(f"breakpoint tau must lie in (0,1), got {self.tau}")
        if not (0.0 <= self.rho <= 1.0):
            raise FlowError(f"mass rho must lie in [0,1], got {self.rho}")


def t_from_uniforms(dist: TimestepDistribution, coin, u):
    """Map two uniform [0,1) draws to a biased timestep; broadcasts."""
    coin = np.asarray(coin, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    low = u * dist.tau
    high = dist.tau + u * (1.0 - dist.tau)
    return np.where(coin < dist.rho, low, high)


def sample_t(dist: TimestepDistribution, gen: np.random.Generator, size=None):
    """Draw timesteps from the biased distribution."""
    n = 1 if size is None else size
    coin = gen.random(n)
    u = gen.random(n)
    out = t_from_uniforms(dist, coin, u)
    return float(out[0]) if size is None else out


def pdf(dist: TimestepDistribution, t):
    t = np.asarray(t, dtype=np.float64)
    if (t < 0).any() or (t > 1).any():
        raise FlowError("timestep outside [0, 1]")
    dens = np.where(t <= dist.tau, dist.rho / dist.tau, (1.0 - dist.rho) / (1.0 - dist.tau))
    return float(dens) if dens.ndim == 0 else dens


# --- noising algebra -------------------------------------------------------------

def _check_convention(convention: str):
    if convention not in ("noise_at_zero", "noise_at_one"):
        raise FlowError(f"unknown noise convention {convention!r}")


def noise(clean: np.ndarray, gaussian: np.ndarray, t: float, convention: str = "noise_at_zero") -> np.ndarray:
    """Linear interpolant z_t between pure noise (t=0) and the clean signal (t=1)."""
    _check_convention(convention)
    clean = np.asarray(clean, dtype=np.float64)
    gaussian = np.asarray(gaussian, dtype=np.float64)
    if clean.shape != gaussian.shape:
        raise FlowError(f"shape mismatch: clean {clean.shape} vs gaussian {gaussian.shape}")
    if not (0.0 <= t <= 1.0):
        raise FlowError(f"timestep {t} outside [0, 1]")
    if convention == "noise_at_one":
        t = 1.0 - t
    return t * clean + (1.0 - t) * gaussian


def velocity_target(clean: np.ndarray, gaussian: np.ndarray) -> np.ndarray:
    """dz_t/dt of the interpolant, constant in t."""
    clean = np.asarray(clean, dtype=np.float64)
    gaussian = np.asarray(gaussian, dtype=np.float64)
    if clean.shape != gaussian.shape:
        raise FlowError(f"shape mismatch: clean {clean.shape} vs gaussian {gaussian.shape}")
    return clean - gaussian


# --- the toy model ---------------------------------------------------------------

@dataclass
class TinyRelighter:
    """Per-pixel 83 -> 64 -> 64 -> 3 tanh MLP predicting velocity.

    Input layout: noised pixel (3), input pixel (3), condition pixel (3),
    normalized (x, y) coords (2), timestep Fourier bands (2*t_bands), sun
    embedding (sun_dim).
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    t_bands: int = 4
    sun_dim: int = 64

    def __post_init__(self):
        for name in ("w1", "b1", "w2", "b2", "w3", "b3"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.isfinite(arr).all():
                raise FlowError(f"non-finite weights in {name}")
            setattr(self, name, arr)
        h1, fin = self.w1.shape
        h2 = self.w2.shape[0]
        want = 11 + 2 * self.t_bands + self.sun_dim
        if fin != want:
            raise FlowError(f"input width {fin} does not match feature layout {want}")
        if self.w2.shape != (h2, h1) or self.w3.shape != (3, h2):
            raise FlowError("layer widths do not chain")
        if self.b1.shape != (h1,) or self.b2.shape != (h2,) or self.b3.shape != (3,):
            raise FlowError("bias shapes do not match layer widths")

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    def arch_hash(self) -> str:
        desc = (
            f"pixel-relighter/tanh/in={self.in_dim}"
            f"/h={self.w1.shape[0]}x{self.w2.shape[0]}/out=3"
            f"/tbands={self.t_bands}/sundim={self.sun_dim}"
        )
        return hashlib.sha256(desc.encode("ascii")).hexdigest()

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in ("w1", "b1", "w2", "b2", "w3", "b3")}

    def with_params(self, params: dict[str, np.ndarray]) -> "TinyRelighter":
        return TinyRelighter(
            w1=params["w1"], b1=params["b1"], w2=params["w2"], b2=params["b2"],
            w3=params["w3"], b3=params["b3"], t_bands=self.t_bands, sun_dim=self.sun_dim,
        )


def init_relighter(seed: int = 0, hidden: int = 64, t_bands: int = 4, sun_dim: int = 64) -> TinyRelighter:
    g = np.random.default_rng(seed)
    fin = 11 + 2 * t_bands + sun_dim
    return TinyRelighter(
        w1=g.normal(0.0, 1.0 / math.sqrt(fin), size=(hidden, fin)),
        b1=np.zeros(hidden),
        w2=g.normal(0.0, 1.0 / math.sqrt(hidden), size=(hidden, hidden)),
        b2=np.zeros(hidden),
        w3=g.normal(0.0, 1.0 / math.sqrt(hidden), size=(3, hidden)),
        b3=np.zeros(3),
        t_bands=t_bands,
        sun_dim=sun_dim,
    )


@dataclass
class PixelBatch:
    """Aligned per-pixel training rows plus the shared sun embedding."""

    input_pixels: np.ndarray      # (N, 3)
    condition_pixels: np.ndarray  # (N, 3)
    coords: np.ndarray            # (N, 2) normalized to [0, 1]
    sun: np.ndarray               # (sun_dim,) or (N, sun_dim)
    clean: np.ndarray             # (N, 3) target composite pixels

    def __post_init__(self):
        for name in ("input_pixels", "condition_pixels", "coords", "sun", "clean"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = self.clean.shape[0]
        ok = (
            self.input_pixels.shape == (n, 3)
            and self.condition_pixels.shape == (n, 3)
            and self.coords.shape == (n, 2)
            and self.clean.shape == (n, 3)
        )
        if not ok:
            raise FlowError("batch arrays disagree on row count or width")

    def sun_rows(self) -> np.ndarray:
        n = self.clean.shape[0]
        if self.sun.ndim == 1:
            return np.broadcast_to(self.sun, (n, self.sun.shape[0]))
        if self.sun.shape[0] != n:
            raise FlowError("per-row sun embedding has wrong length")
        return self.sun


def _features(model: TinyRelighter, z_t: np.ndarray, batch: PixelBatch, t: float) -> np.ndarray:
    tff = fourier_features(t, model.t_bands)
    n = z_t.shape[0]
    sun = batch.sun_rows()
    if sun.shape[1] != model.sun_dim:
        raise FlowError(f"sun embedding width {sun.shape[1]}, model expects {model.sun_dim}")
    return np.concatenate(
        [z_t, batch.input_pixels, batch.condition_pixels, batch.coords,
         np.broadcast_to(tff, (n, tff.shape[0])), sun],
        axis=1,
    )


def _forward(model: TinyRelighter, x: np.ndarray):
    a1 = x @ model.w1.T + model.b1
    h1 = np.tanh(a1)
    a2 = h1 @ model.w2.T + model.b2
    h2 = np.tanh(a2)
    out = h2 @ model.w3.T + model.b3
    # check pre-activations: tanh squashes inf to 1 and would hide the blow-up
    for name, act in (("layer1", a1), ("layer2", a2), ("output", out)):
        if not np.isfinite(act).all():
            raise FlowError(f"non-finite activations in {name}")
    return out, h1, h2


def predict_velocity(model: TinyRelighter, z_t: np.ndarray, batch: PixelBatch, t: float) -> np.ndarray:
    out, _, _ = _forward(model, _features(model, z_t, batch, t))
    return out


def flow_loss(
    model: TinyRelighter,
    batch: PixelBatch,
    t: float,
    gaussian: np.ndarray,
    objective: str = "velocity",
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared prediction error and its gradient wrt every weight.

    objective="velocity" regresses the interpolant's velocity (the useful
    target). objective="latent" regresses the noised latent itself; it is
    kept only to demonstrate that this reading collapses, since the latent is
    already part of the model input.
    """
    if objective not in ("velocity", "latent"):
        raise FlowError(f"unknown objective {objective!r}")
    z_t = noise(batch.clean, gaussian, t)
    target = velocity_target(batch.clean, gaussian) if objective == "velocity" else z_t
    x = _features(model, z_t, batch, t)
    out, h1, h2 = _forward(model, x)

    n = out.shape[0]
    r = out - target
    loss = float((r * r).sum() / n)  # mean over rows of the squared norm

    dout = (2.0 / n) * r
    grads = {
        "w3": dout.T @ h2,
        "b3": dout.sum(axis=0),
    }
    da2 = (dout @ model.w3) * (1.0 - h2 * h2)
    grads["w2"] = da2.T @ h1
    grads["b2"] = da2.sum(axis=0)
    da1 = (da2 @ model.w2) * (1.0 - h1 * h1)
    grads["w1"] = da1.T @ x
    grads["b1"] = da1.sum(axis=0)
    return loss, grads


# --- Adam ----------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: dict[str, np.ndarray]) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
    )


def adam_step(
    state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; mutates state, returns new params."""
    if set(grads) != set(params):
        raise FlowError("gradient keys do not match parameter keys")
    for k, g in grads.items():
        if not np.isfinite(g).all():
            raise FlowError(f"non-finite gradient for {k}")
        if g.shape != params[k].shape:
            raise FlowError(f"gradient shape {g.shape} != param shape {params[k].shape} for {k}")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    out = {}
    for k, p in params.items():
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * grads[k]
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * grads[k] ** 2
        mhat = state.m[k] / c1
        vhat = state.v[k] / c2
        out[k] = p - lr * mhat / (np.sqrt(vhat) + state.eps)
    return out


# --- toy training harness ----------------------------------------------------------

@dataclass
class ToySample:
    """One aligned training frame: what the model sees and what it should make."""

    input_image: np.ndarray      # (H, W, 3) tone-mapped render under source lighting
    condition_frame: np.ndarray  # (H, W, 3) edit colors + sentinel
    sun: float                   # exterior intensity of the target lighting
    target_image: np.ndarray     # (H, W, 3) tone-mapped composite under target lighting


@dataclass
class TrainReport:
    arm: str
    seed: int
    steps: int
    train_loss: list[float]             # one entry per optimizer step
    val_steps: list[int]
    val_loss: list[float]

    def summary(self) -> dict:
        return {
            "arm": self.arm,
            "seed": self.seed,
            "steps": self.steps,
            "initial_val_loss": self.val_loss[0],
            "final_val_loss": self.val_loss[-1],
            "final_train_loss": self.train_loss[-1] if self.train_loss else None,
            "all_finite": bool(
                np.isfinite(self.train_loss).all() and np.isfinite(self.val_loss).all()
            ),
        }


def _gaussian_from_keys(seed: int, step: int, rows: np.ndarray, cols: int) -> np.ndarray:
    """Box-Muller on counter-rng uniforms, keyed so reruns are bit-identical."""
    jj = np.arange(cols)
    u1 = 1.0 - crng.uniform(seed, _S_NOISE, 0, step, rows[:, None], jj)  # (0,1], log-safe
    u2 = crng.uniform(seed, _S_NOISE, 1, step, rows[:, None], jj)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)


def _flatten_dataset(dataset: list[ToySample], mlp: SunMlp):
    cols_in, cols_cond, cols_xy, cols_sun, cols_tgt = [], [], [], [], []
    for sample in dataset:
        img = np.asarray(sample.input_image, dtype=np.float64)
        h, w = img.shape[:2]
        ys, xs = np.mgrid[0:h, 0:w]
        coords = np.stack([(xs.ravel() + 0.5) / w, (ys.ravel() + 0.5) / h], axis=1)
        emb = sun_embedding(sample.sun, mlp).vector
        cols_in.append(img.reshape(-1, 3))
        cols_cond.append(np.asarray(sample.condition_frame, dtype=np.float64).reshape(-1, 3))
        cols_xy.append(coords)
        cols_sun.append(np.broadcast_to(emb, (h * w, emb.shape[0])))
        cols_tgt.append(np.asarray(sample.target_image, dtype=np.float64).reshape(-1, 3))
    return (
        np.concatenate(cols_in),
        np.concatenate(cols_cond),
        np.concatenate(cols_xy),
        np.concatenate(cols_sun),
        np.concatenate(cols_tgt),
    )


def _val_loss(model: TinyRelighter, batch: PixelBatch) -> float:
    """Loss on the held-out pixels at a fixed t grid with frozen noise."""
    n = batch.clean.shape[0]
    rows = np.arange(n)
    total = 0.0
    for i, t in enumerate(_VAL_T_GRID):
        gaussian = _gaussian_from_keys(_VAL_SPLIT_SEED, i, rows, 3)
        loss, _ = flow_loss(model, batch, t, gaussian)
        total += loss
    return total / len(_VAL_T_GRID)


def train_toy(
    dataset: list[ToySample],
    sampler_mode: str = "biased",
    steps: int = 2000,
    seed: int = 0,
    batch_size: int = 512,
    val_every: int = 50,
    lr: float = 1e-3,
    dist: TimestepDistribution | None = None,
) -> TrainReport:
    """Train the toy relighter; bitwise reproducible in (dataset, mode, steps, seed).

    sampler_mode "biased" draws timesteps from `dist`; "uniform" is the
    ablation arm with t ~ U[0,1]. The validation split is a fixed 10% of
    pixels shared by every run so arms and seeds stay comparable.
    """
    if sampler_mode not in ("biased", "uniform"):
        raise FlowError(f"unknown sampler mode {sampler_mode!r}")
    if not dataset:
        raise FlowError("dataset is empty")
    dist = dist or TimestepDistribution()

    sun_weights = init_sun_mlp(seed=0)
    xin, xcond, xy, xsun, xtgt = _flatten_dataset(dataset, sun_weights)
    n = xtgt.shape[0]
    val_mask = crng.uniform(_VAL_SPLIT_SEED, np.arange(n)) < 0.1
    train_idx = np.flatnonzero(~val_mask)
    val_idx = np.flatnonzero(val_mask)

    def gather(idx):
        return PixelBatch(
            input_pixels=xin[idx], condition_pixels=xcond[idx], coords=xy[idx],
            sun=xsun[idx], clean=xtgt[idx],
        )

    val_batch = gather(val_idx)
    model = init_relighter(seed)
    params = model.params()
    state = adam_init(params)

    train_losses: list[float] = []
    val_steps = [0]
    val_losses = [_val_loss(model, val_batch)]

    for k in range(1, steps + 1):
        pick = crng.uniform(seed, _S_BATCH, k, np.arange(batch_size))
        idx = train_idx[(pick * train_idx.shape[0]).astype(np.int64)]
        batch = gather(idx)

        if sampler_mode == "biased":
            t = float(t_from_uniforms(dist, crng.uniform(seed, _S_COIN, k), crng.uniform(seed, _S_T, k)))
        else:
            t = float(crng.uniform(seed, _S_T, k))
        gaussian = _gaussian_from_keys(seed, k, idx, 3)

        loss, grads = flow_loss(model.with_params(params), batch, t, gaussian)
        params = adam_step(state, params, grads, lr)
        train_losses.append(loss)

        if k % val_every == 0 or k == steps:
            val_steps.append(k)
            val_losses.append(_val_loss(model.with_params(params), val_batch))

    return TrainReport(
        arm=sampler_mode, seed=seed, steps=steps,
        train_loss=train_losses, val_steps=val_steps, val_loss=val_losses,
    )


# --- checkpoints ---------------------------------------------------------------------

def save_relighter(path: Path, model: TinyRelighter) -> None:
    np.savez(
        Path(path),
        arch=np.array(model.arch_hash()),
        t_bands=np.array(model.t_bands),
        sun_dim=np.array(model.sun_dim),
        **model.params(),
    )


def load_relighter(path: Path) -> TinyRelighter:
    with np.load(Path(path)) as z:
        model = TinyRelighter(
            w1=z["w1"], b1=z["b1"], w2=z["w2"], b2=z["b2"], w3=z["w3"], b3=z["b3"],
            t_bands=int(z["t_bands"]), sun_dim=int(z["sun_dim"]),
        )
        stored = str(z["arch"])
    if stored != model.arch_hash():
        raise FlowError("checkpoint architecture hash does not match this model")
    return model
