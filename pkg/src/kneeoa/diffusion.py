"""Denoising diffusion: noise schedule, U-Net noise predictor, DDIM sampling.

Timesteps run 1..T.  ``alpha_bar(0)`` is the clean-data boundary and equals 1.
Images enter the network rescaled from [0, 1] to [-1, 1].
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .imaging import GrayImage, write_image
from .nngraph import Adam, Tape, Tensor, load_checkpoint, ops, save_checkpoint

log = logging.getLogger(__name__)


class ScheduleError(ValueError):
    pass


class ModelError(ValueError):
    pass


class TrainingError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step arrays indexed by ``t - 1``."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t):
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ScheduleError(f"timestep outside 0..{self.T}")
        padded = np.concatenate([[1.0], self.alpha_bars])
        out = padded[t]
        return float(out) if out.ndim == 0 else out


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule from ``beta_start`` to ``beta_end`` over T steps."""
    if T < 1:
        raise ScheduleError(f"need at least one timestep, got T={T}")
    betas = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    if np.any(betas <= 0) or np.any(betas >= 1):
        raise ScheduleError("betas must lie in (0, 1)")
    alphas = 1.0 - betas
    return NoiseSchedule(T, betas, alphas, np.cumprod(alphas))


def forward_diffuse(schedule: NoiseSchedule, x0: np.ndarray, t, noise: np.ndarray) -> np.ndarray:
    """Sample ``x_t`` given clean ``x0``; ``t`` is a scalar or one step per batch item."""
    x0 = np.asarray(x0)
    noise = np.asarray(noise)
    if noise.shape != x0.shape:
        raise ValueError(f"noise shape {noise.shape} differs from x0 shape {x0.shape}")
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise ScheduleError(f"t must be in 1..{schedule.T}")
    ab = np.asarray(schedule.alpha_bar(t), dtype=np.float64)
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


# -- network -------------------------------------------------------------------

class DenoiserNet:
    """Three-level U-Net that predicts the noise in ``x_t``.

    Channel widths are ``base``, ``2*base``, ``4*base``; every level has two
    conv + instance-norm + SiLU blocks, and a dense projection of the
    timestep embedding is added after the first block of each level.
    """

    def __init__(self, image_size: int = 64, base_channels: int = 32, embed_dim: int = 128,
                 seed: int = 0, dtype=np.float32):
        if image_size % 4:
            raise ModelError(f"image_size must be divisible by 4, got {image_size}")
        self.image_size = image_size
        self.base_channels = base_channels
        self.embed_dim = embed_dim
        self.dtype = np.dtype(dtype)
        self.trained_steps = 0
        c = base_channels
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        # (name, in, out) for every 3x3 block in forward order
        self._blocks = [
            ("enc1a", 1, c), ("enc1b", c, c),
            ("enc2a", c, 2 * c), ("enc2b", 2 * c, 2 * c),
            ("mida", 2 * c, 4 * c), ("midb", 4 * c, 4 * c),
            ("dec2a", 6 * c, 2 * c), ("dec2b", 2 * c, 2 * c),
            ("dec1a", 3 * c, c), ("dec1b", c, c),
        ]
        for name, cin, cout in self._blocks:
            self._add(f"{name}.w", rng.normal(0, np.sqrt(2.0 / (9 * cin)), (cout, cin, 3, 3)))
            self._add(f"{name}.gamma", np.ones(cout))
            self._add(f"{name}.beta", np.zeros(cout))
            if name.endswith("a"):
                self._add(f"{name}.temb.w", rng.normal(0, np.sqrt(1.0 / embed_dim), (cout, embed_dim)))
                self._add(f"{name}.temb.b", np.zeros(cout))
        self._add("out.w", np.zeros((1, c, 1, 1)))
        self._add("out.b", np.zeros(1))

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def _block(self, name: str, h: Tensor, emb: Tensor | None) -> Tensor:
        p = self.params
        h = ops.conv2d(h, p[f"{name}.w"], pad=1)
        h = ops.silu(ops.instance_norm(h, p[f"{name}.gamma"], p[f"{name}.beta"]))
        if emb is not None and f"{name}.temb.w" in p:
            proj = ops.dense(emb, p[f"{name}.temb.w"], p[f"{name}.temb.b"])
            h = ops.add(h, ops.reshape(proj, (proj.shape[0], proj.shape[1], 1, 1)))
        return h

    def forward(self, x: Tensor, t) -> Tensor:
        if x.data.ndim != 4 or x.shape[1:] != (1, self.image_size, self.image_size):
            raise ModelError(f"expected input (N, 1, {self.image_size}, {self.image_size}), got {x.shape}")
        emb = ops.sinusoidal_embed(Tensor(np.asarray(t, dtype=self.dtype).reshape(-1)), self.embed_dim)
        blk = self._block
        s1 = blk("enc1b", blk("enc1a", x, emb), emb)
        s2 = blk("enc2b", blk("enc2a", ops.avg_pool2d(s1, 2), emb), emb)
        m = blk("midb", blk("mida", ops.avg_pool2d(s2, 2), emb), emb)
        d2 = ops.concat(ops.upsample_nearest2x(m), s2, axis=1)
        d2 = blk("dec2b", blk("dec2a", d2, emb), emb)
        d1 = ops.concat(ops.upsample_nearest2x(d2), s1, axis=1)
        d1 = blk("dec1b", blk("dec1a", d1, emb), emb)
        return ops.conv2d(d1, self.params["out.w"], self.params["out.b"])

    def predict_noise(self, x: np.ndarray, t) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        t = np.broadcast_to(np.asarray(t), (x.shape[0],))
        return self.forward(Tensor(x), t).data

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: p.data.copy() for k, p in self.params.items()}
        state["meta.config"] = np.array([self.image_size, self.base_channels, self.embed_dim, self.trained_steps],
                                        dtype=np.int64)
        return state

    def save(self, path) -> None:
        save_checkpoint(path, self.state_dict())

    @classmethod
    def load(cls, path) -> "DenoiserNet":
        state = load_checkpoint(path)
        if "meta.config" not in state:
            raise ModelError(f"{path} is not a denoiser checkpoint")
        size, base, emb, steps = (int(v) for v in state.pop("meta.config"))
        dtype = state["out.w"].dtype
        net = cls(size, base, emb, dtype=dtype)
        if set(state) != set(net.params):
            raise ModelError(f"{path}: parameter names do not match the architecture")
        for k, v in state.items():
            if v.shape != net.params[k].shape:
                raise ModelError(f"{path}: {k} has shape {v.shape}, expected {net.params[k].shape}")
            net.params[k].data = v
        net.trained_steps = steps
        return net


# -- training ----------------------------------------------------------------

@dataclass(frozen=True)
class DiffusionTrainConfig:
    epochs: int = 5
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    timesteps: int = 1000
    base_channels: int = 32
    embed_dim: int = 128


def _as_batch(images) -> np.ndarray:
    if isinstance(images, np.ndarray):
        arr = images.astype(np.float64)
    else:
        arr = np.stack([im.pixels if isinstance(im, GrayImage) else np.asarray(im) for im in images])
    if arr.ndim == 3:
        arr = arr[:, None]
    return arr


def train_denoiser(images, config: DiffusionTrainConfig = DiffusionTrainConfig(),
                   net: DenoiserNet | None = None) -> tuple[DenoiserNet, list[float]]:
    """Fit an epsilon-prediction denoiser; returns the net and mean loss per epoch.

    ``images`` are square [0, 1] rasters (GrayImages or an (N, H, W) array).
    """
    if len(images) == 0:
        raise TrainingError("cannot train a denoiser on an empty dataset")
    data = _as_batch(images) * 2.0 - 1.0
    n, _, h, w = data.shape
    if h != w:
        raise TrainingError(f"denoiser images must be square, got {h}x{w}")
    if net is None:
        net = DenoiserNet(h, config.base_channels, config.embed_dim, seed=config.seed)
    schedule = build_schedule(config.timesteps)
    rng = np.random.default_rng([config.seed, 1])
    opt = Adam(net.params, lr=config.lr)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            x0 = data[idx]
            t = rng.integers(1, schedule.T + 1, size=len(idx))
            eps = rng.standard_normal(x0.shape)
            xt = forward_diffuse(schedule, x0, t, eps)
            opt.zero_grad()
            with Tape() as tape:
                pred = net.forward(Tensor(xt.astype(net.dtype)), t)
                loss = ops.mse(pred, Tensor(eps.astype(net.dtype)))
            tape.backward(loss)
            opt.step()
            net.trained_steps += 1
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        log.info("denoiser epoch %d/%d loss %.4f", epoch + 1, config.epochs, history[-1])
    return net, history


# -- DDIM sampling -------------------------------------------------------------

class NoisePredictor(Protocol):
    image_size: int

    def predict_noise(self, x: np.ndarray, t) -> np.ndarray: ...


@dataclass(frozen=True)
class SampleRequest:
    count: int
    ddim_steps: int = 50
    eta: float = 0.0
    seed: int = 0
    batch_size: int = 32

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("count must be non-negative")
        if self.ddim_steps < 1:
            raise ValueError("ddim_steps must be at least 1")
        if self.eta < 0:
            raise ValueError("eta must be non-negative")


def ddim_subsequence(T: int, S: int) -> list[int]:
    """``S`` descending timesteps spaced ``T // S`` apart, starting at T.

    The sampler hops from the last entry to the t=0 boundary.
    """
    if not 1 <= S <= T:
        raise ScheduleError(f"need 1 <= S <= T, got S={S}, T={T}")
    stride = T // S
    return [T - i * stride for i in range(S)]


def ddim_step(schedule: NoiseSchedule, x_t: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int,
              eta: float = 0.0, z: np.ndarray | None = None) -> np.ndarray:
    """One DDIM update from ``t`` to ``t_prev`` (``t_prev = 0`` is the clean boundary)."""
    if not schedule.T >= t > t_prev >= 0:
        raise ScheduleError(f"need T >= t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t_prev)
    x0_hat = np.clip((x_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t), -1.0, 1.0)
    sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_prev)
    direction = 1.0 - ab_prev - sigma ** 2
    if direction < -1e-12:
        raise ScheduleError(f"sigma^2 exceeds 1 - alpha_bar at t_prev={t_prev} (eta={eta})")
    out = np.sqrt(ab_prev) * x0_hat + np.sqrt(max(direction, 0.0)) * eps_hat
    if sigma > 0:
        if z is None:
            raise ValueError("eta > 0 needs a noise draw z")
        out = out + sigma * z
    return out


def sample(model: NoisePredictor, schedule: NoiseSchedule, request: SampleRequest) -> list[GrayImage]:
    """Generate ``request.count`` images; image ``i`` draws all its noise from seed + i."""
    if not hasattr(model, "predict_noise") or not hasattr(model, "image_size"):
        raise ModelError("model must provide predict_noise() and image_size")
    if getattr(model, "trained_steps", None) == 0:
        raise ModelError("denoiser has not been trained")
    size = model.image_size
    steps = ddim_subsequence(schedule.T, request.ddim_steps)
    hops = list(zip(steps, steps[1:] + [0]))
    images: list[GrayImage] = []
    for start in range(0, request.count, request.batch_size):
        idx = range(start, min(start + request.batch_size, request.count))
        rngs = [np.random.default_rng(request.seed + i) for i in idx]
        x = np.stack([r.standard_normal((1, size, size)) for r in rngs])
        for t, t_prev in hops:
            eps = np.asarray(model.predict_noise(x, np.full(len(rngs), t)), dtype=np.float64)
            if eps.shape != x.shape:
                raise ModelError(f"model returned {eps.shape}, expected {x.shape}")
            z = np.stack([r.standard_normal((1, size, size)) for r in rngs]) if request.eta > 0 else None
            x = ddim_step(schedule, x, eps, t, t_prev, request.eta, z)
        images.extend(GrayImage(np.clip((xi[0] + 1.0) / 2.0, 0.0, 1.0)) for xi in x)
    return images


def write_generated(images: Sequence[GrayImage], out_dir, grade: int) -> list[Path]:
    """Write ``out_dir/{grade}/00000.pgm, 00001.pgm, ...``."""
    gdir = Path(out_dir) / str(grade)
    gdir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        path = gdir / f"{i:05d}.pgm"
        write_image(path, img)
        paths.append(path)
    return paths
