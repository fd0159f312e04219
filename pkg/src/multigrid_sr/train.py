"""Optimizer, training loops and checkpoints."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import generator as G
from . import losses
from .data import Sampler, center_patch, degrade, list_images, load_layout
from .discriminator import DESK_WIDTHS, discriminate, init_discriminator
from .imageio import read_image
from .plan import DESK_SCHEDULE, unfold
from .tensor import Tensor, no_grad
from .weights_io import load_discriminator, load_weights, save_discriminator, save_weights

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


# -- optimizer ------------------------------------------------------------------

@dataclass
class OptimizerState:
    # beta1 = 0.995 (a ~200-step momentum horizon) kept the discriminator
    # pushing its logits apart long after its loss saturated; 0.9 does not
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    nu1: float = 0.7
    nu2: float = 1.0
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    skipped: int = 0

    def init_buffers(self, params):
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        elif [m.shape for m in self.m] != [np.shape(p) for p in params]:
            raise ValueError("optimizer moment buffers do not match parameter shapes")


def qhadam_step(params, grads, state: OptimizerState):
    """One quasi-hyperbolic Adam update, in place on the ``params`` arrays.

    With nu1 = nu2 = 1 this is exactly Adam.  A step with any non-finite
    gradient is skipped (returns False) and leaves params and state untouched.
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    grads = [np.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
    if not all(np.isfinite(g).all() for g in grads):
        state.skipped += 1
        log.warning("non-finite gradient at step %d; update skipped", state.step + 1)
        return False
    state.init_buffers(params)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1, bc2 = 1.0 - b1**t, 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        num = (1.0 - state.nu1) * g + state.nu1 * (m / bc1)
        den = np.sqrt((1.0 - state.nu2) * (g * g) + state.nu2 * (v / bc2)) + state.eps
        p -= (state.lr * num / den).astype(p.dtype)
    return True


class QHAdam:
    """Thin wrapper binding :func:`qhadam_step` to a list of parameter tensors."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), nus=(0.7, 1.0), eps=1e-8):
        self.params = list(params)
        self.state = OptimizerState(lr=lr, beta1=betas[0], beta2=betas[1], nu1=nus[0], nu2=nus[1], eps=eps)

    def step(self):
        return qhadam_step([p.data for p in self.params], [p.grad for p in self.params], self.state)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_arrays(self):
        s = self.state
        out = {"scalars": np.array([s.step, s.skipped], dtype=np.int64)}
        for i, (m, v) in enumerate(zip(s.m, s.v)):
            out[f"m{i}"], out[f"v{i}"] = m, v
        return out

    def load_state_arrays(self, arrays):
        s = self.state
        s.step, s.skipped = (int(x) for x in arrays["scalars"])
        n = sum(1 for k in arrays if k.startswith("m"))
        s.m = [np.array(arrays[f"m{i}"]) for i in range(n)]
        s.v = [np.array(arrays[f"v{i}"]) for i in range(n)]


# -- configuration ----------------------------------------------------------------

@dataclass
class TrainConfig:
    data: str = ""
    out_dir: str = "run"
    val_dir: str = ""
    track: str = "fidelity"
    mu: int = 2
    levels: int = len(DESK_SCHEDULE)
    schedule: tuple = DESK_SCHEDULE
    filter_size: int = 3
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    nu1: float = 0.7
    nu2: float = 1.0
    eps: float = 1e-8
    batch: int = 4
    train_patch: int = 128
    val_patch: int = 128
    epochs: int = 2
    steps_per_epoch: int = 100
    seed: int = 0
    disc_widths: tuple = DESK_WIDTHS
    d_steps: int = 1
    noise_amplitude: float = 1.0

    def validate(self):
        if self.track not in ("fidelity", "perceptual"):
            raise ValueError(f"track must be 'fidelity' or 'perceptual', got {self.track!r}")
        if len(self.schedule) != self.levels:
            raise ValueError(f"schedule {list(self.schedule)} does not have levels={self.levels} entries")
        for name in ("batch", "epochs", "steps_per_epoch", "d_steps", "mu", "levels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        return self


def _coerce(value, default):
    if isinstance(default, tuple):
        return tuple(int(v) for v in str(value).split(",") if v.strip())
    if isinstance(default, bool):
        return str(value).lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return str(value)


def make_config(**overrides):
    base = TrainConfig()
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(overrides) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    values = {k: _coerce(v, getattr(base, k)) for k, v in overrides.items()}
    return dataclasses.replace(base, **values).validate()


def load_config(path, **overrides):
    """Read a ``key = value`` text config; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    values.update({k: v for k, v in overrides.items() if v is not None})
    return make_config(**values)


def dump_config(config):
    lines = []
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            value = ",".join(map(str, value))
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


# -- checkpoints ---------------------------------------------------------------------

@dataclass
class Checkpoint:
    path: Path
    epoch: int
    best_value: float


def save_checkpoint(path, plan, weights, optimizers, epoch, best_value, disc=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_weights(path / "generator.wts", plan, weights)
    if disc is not None:
        save_discriminator(path / "discriminator.wts", disc)
    arrays = {}
    for name, opt in optimizers.items():
        arrays.update({f"{name}/{k}": v for k, v in opt.state_arrays().items()})
    np.savez(path / "optimizer.npz", **arrays)
    (path / "state.txt").write_text(f"epoch = {epoch}\nbest_value = {best_value!r}\n")
    return Checkpoint(path, epoch, best_value)


def load_checkpoint(path):
    """Return ``(plan, weights, disc_or_None, state_dict)``."""
    path = Path(path)
    plan, weights = load_weights(path / "generator.wts")
    disc = load_discriminator(path / "discriminator.wts") if (path / "discriminator.wts").exists() else None
    state = {}
    for line in (path / "state.txt").read_text().splitlines():
        key, value = (s.strip() for s in line.split("=", 1))
        state[key] = float(value)
    return plan, weights, disc, state


# -- training loops --------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint | None
    best_value: float
    history: list
    validation: list
    weights: G.GeneratorWeights
    plan: object
    disc: object = None
    records: list = field(default_factory=list)


class _Log:
    def __init__(self, path):
        self.path = Path(path) if path else None
        self.lines = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, lines):
        self.lines.extend(lines)
        if self.path:
            with self.path.open("a") as fh:
                fh.write("\n".join(lines) + "\n")


def validation_patches(config, layout):
    """Centre patch of each validation image (or of each training folder)."""
    patches = []
    if config.val_dir:
        for p in list_images(config.val_dir):
            patches.append(center_patch(read_image(p), config.val_patch))
    else:
        for name in layout.images:
            tile = read_image(layout.root / name / layout.files[name][0])
            patches.append(center_patch(tile, min(config.val_patch, tile.shape[-1])))
    if not patches:
        raise ValueError("no validation images")
    return np.stack(patches)


def _setup(config):
    config.validate()
    layout = load_layout(config.data)
    plan = unfold(config.mu, config.levels, config.schedule, config.filter_size)
    weights = G.init_weights(plan, seed=config.seed)
    opt = QHAdam(
        weights.parameters(), lr=config.lr, betas=(config.beta1, config.beta2),
        nus=(config.nu1, config.nu2), eps=config.eps,
    )
    return layout, plan, weights, opt


def _check_divergence(epoch_losses, initial):
    if epoch_losses and min(epoch_losses) > 10.0 * initial:
        raise TrainingDiverged(
            f"training loss stayed above 10x its initial value ({initial:.4g}) for a full epoch "
            f"(min {min(epoch_losses):.4g})"
        )


def train_fidelity(config, log_path=None):
    """Train with the multi-scale L1 objective; keep the best full-resolution L2 model."""
    layout, plan, weights, opt = _setup(config)
    sampler = Sampler(layout, seed=config.seed)
    val_hr = validation_patches(config, layout)
    val_lr = degrade(val_hr)
    out_dir = Path(config.out_dir)
    logger = _Log(log_path if log_path is not None else out_dir / "train.log")
    history, validation = [], []
    best, ckpt, initial = np.inf, None, None
    step = 0
    for epoch in range(1, config.epochs + 1):
        epoch_losses = []
        for _ in range(config.steps_per_epoch):
            step += 1
            lr_b, hr_b = sampler.sample(config.batch, config.train_patch)
            y0 = G.forward(lr_b, G.NoiseConfig(0.0), plan, weights)
            report = losses.fidelity_loss(y0, Tensor(hr_b))
            total = report.total
            total.backward()
            opt.step()
            opt.zero_grad()
            value = total.item()
            initial = value if initial is None else initial
            history.append(value)
            epoch_losses.append(value)
            logger.write(report.log_lines(step))
        _check_divergence(epoch_losses, initial)
        with no_grad():
            y0 = G.forward(val_lr, G.NoiseConfig(0.0), plan, weights)
            val = losses.fidelity_validation(y0, Tensor(val_hr)).item()
        validation.append(val)
        logger.write([f"{step}\tval_l2\t{val:.9g}"])
        if val < best:
            best = val
            ckpt = save_checkpoint(out_dir / "best", plan, weights, {"g": opt}, epoch, best)
            log.info("epoch %d: validation L2 %.6g (new best)", epoch, val)
    return TrainResult(ckpt, best, history, validation, weights, plan, records=logger.lines)


def train_perceptual(config, log_path=None, metric=None):
    """Adversarial training; keep the model with the lowest multi-scale no-reference score."""
    layout, plan, weights, opt_g = _setup(config)
    disc = init_discriminator(config.disc_widths, seed=config.seed + 1)
    opt_d = QHAdam(
        disc.parameters(), lr=config.lr, betas=(config.beta1, config.beta2),
        nus=(config.nu1, config.nu2), eps=config.eps,
    )
    sampler = Sampler(layout, seed=config.seed)
    noise_rng = np.random.default_rng(config.seed + 2)
    val_hr = validation_patches(config, layout)
    val_lr = degrade(val_hr)
    extractor = losses.default_extractor()
    out_dir = Path(config.out_dir)
    logger = _Log(log_path if log_path is not None else out_dir / "train.log")
    history, validation = [], []
    best, ckpt, initial = np.inf, None, None
    W = config.noise_amplitude
    step = 0
    for epoch in range(1, config.epochs + 1):
        epoch_losses = []
        for _ in range(config.steps_per_epoch):
            step += 1
            lr_b, hr_b = sampler.sample(config.batch, config.train_patch)
            hr = Tensor(hr_b)
            noise_seed = int(noise_rng.integers(2**31))
            records = [f"{step}\tnoise_seed\t{noise_seed}"]

            for _ in range(config.d_steps):
                with no_grad():
                    fake = G.forward(lr_b, G.NoiseConfig(W, noise_seed), plan, weights)
                loss_d, _ = losses.rsgan_losses(discriminate(hr, disc), discriminate(fake.detach(), disc))
                loss_d.backward()
                opt_d.step()
                opt_d.zero_grad()
            records.append(f"{step}\trsgan_d\t{loss_d.item():.9g}")

            y1 = G.forward(lr_b, G.NoiseConfig(W, noise_seed), plan, weights)
            y0 = G.forward(lr_b, G.NoiseConfig(0.0), plan, weights)
            report = losses.perceptual_loss(y1, y0, hr, disc, extractor)
            total = report.total
            total.backward()
            opt_g.step()
            opt_g.zero_grad()
            disc.zero_grad()

            value = total.item()
            initial = value if initial is None else initial
            history.append({"total": value, "rsgan_d": loss_d.item(), **report.values()})
            epoch_losses.append(value)
            logger.write(records + report.log_lines(step))
        _check_divergence(epoch_losses, initial)
        with no_grad():
            y1 = G.forward(val_lr, G.NoiseConfig(W, config.seed), plan, weights)
        val = float(np.mean([losses.perceptual_validation(img, metric) for img in y1.data]))
        validation.append(val)
        logger.write([f"{step}\tval_nr\t{val:.9g}"])
        if val < best:
            best = val
            ckpt = save_checkpoint(out_dir / "best", plan, weights, {"g": opt_g, "d": opt_d}, epoch, best, disc)
            log.info("epoch %d: validation %.6g (new best)", epoch, val)
    return TrainResult(ckpt, best, history, validation, weights, plan, disc, records=logger.lines)


def train(config, log_path=None):
    start = time.perf_counter()
    fn = train_fidelity if config.track == "fidelity" else train_perceptual
    result = fn(config, log_path=log_path)
    log.info("%s training finished in %.1fs", config.track, time.perf_counter() - start)
    return result
