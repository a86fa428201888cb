"""pix2pix and CycleGAN training steps, snapshot schedule, and the training loop."""

import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .dataio import InputStyle
from .models import (
    ConfigError,
    DiscriminatorSpec,
    GeneratorSpec,
    build_patchgan,
    build_resnet_generator,
    build_unet_generator,
)
from .optim import Adam
from .rng import RngSeed
from .tensor import Tensor

log = logging.getLogger(__name__)

ARCHS = ("pix2pix", "cyclegan")


class TrainingDivergedError(RuntimeError):
    """A loss became NaN or infinite."""


@dataclass(frozen=True)
class LossWeights:
    lambda_l1: float = 100.0
    lambda_cycle: float = 10.0
    adversarial: str = ""  # "" picks the architecture default: bce for pix2pix, lsgan for CycleGAN

    def __post_init__(self):
        if self.lambda_l1 < 0 or self.lambda_cycle < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.adversarial not in ("", "bce", "lsgan"):
            raise ConfigError(f"unknown adversarial loss {self.adversarial!r}")


@dataclass(frozen=True)
class TrainConfig:
    arch: str = "pix2pix"
    style: str = "front"
    image_side: int = 64
    base_width: int = 32
    levels: int = 4
    n_blocks: int = 4
    resnet_width: int = 16
    d_layers: int = 3
    d_width: int = 32
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 1
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown architecture {self.arch!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        try:
            style = InputStyle.parse(self.style).value
        except ValueError as e:
            raise ConfigError(str(e)) from None
        object.__setattr__(self, "style", style)

    def adversarial(self):
        if self.weights.adversarial:
            return self.weights.adversarial
        return "bce" if self.arch == "pix2pix" else "lsgan"

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        d["weights"] = LossWeights(**d.get("weights", {}))
        return cls(**d)

    def digest(self):
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def with_overrides(self, **kw):
        return replace(self, **kw)


def adversarial_loss(logits, real, kind):
    if kind == "bce":
        return T.bce_with_logits(logits, 1.0 if real else 0.0)
    return T.mse_loss(logits, Tensor(np.full(logits.shape, 1.0 if real else 0.0, dtype=np.float32)))


def _check_finite(losses, iteration):
    for name, value in losses.items():
        if not math.isfinite(value):
            raise TrainingDivergedError(f"non-finite {name}={value} at iteration {iteration}")


class Trainer:
    """Shared bookkeeping: config, seeded data stream, iteration counter, fixed snapshot input."""

    arch = ""

    def __init__(self, config, snapshot_input=None):
        self.config = config
        self.seed = RngSeed(config.seed)
        self.rng = self.seed.child(100).generator()
        self.iteration = 0
        self.snapshot_input = None if snapshot_input is None else np.array(snapshot_input, dtype=np.float32)

    # subclasses provide: modules(), optimizers(), generator, step(a, b)

    def generate(self, condition):
        """Generator output in [-1, 1] for a (B, C, S, S) condition array."""
        with T.no_grad():
            return self.generator(Tensor(condition)).data

    def sample_batch(self, data):
        """Draw one training batch from ``data`` using the trainer's seeded stream."""
        n = len(data)
        bs = self.config.batch_size
        idx = self.rng.integers(0, n, size=bs)
        if self.arch == "cyclegan":
            other = self.rng.integers(0, n, size=bs)
            return data.conditions[idx], data.targets[other]
        return data.conditions[idx], data.targets[idx]

    def state_tensors(self):
        out = {}
        for prefix, module in self.modules().items():
            for name, p in module.named_parameters():
                out[f"{prefix}.{name}"] = p.data
        return out

    def load_state_tensors(self, tensors):
        for prefix, module in self.modules().items():
            own = {n: t for n, t in tensors.items() if n.startswith(prefix + ".")}
            module.load_state_dict({n[len(prefix) + 1 :]: t for n, t in own.items()})


class Pix2PixTrainer(Trainer):
    arch = "pix2pix"

    def __init__(self, config, snapshot_input=None):
        super().__init__(config, snapshot_input)
        c = config
        self.g_spec = GeneratorSpec(3, 1, c.base_width, c.levels, c.n_blocks, c.image_side)
        self.d_spec = DiscriminatorSpec(3 + 1, c.d_layers, c.d_width, c.image_side)
        self.G = build_unet_generator(self.g_spec, self.seed.child(1))
        self.D = build_patchgan(self.d_spec, self.seed.child(2))
        self.opt_G = Adam(self.G.named_parameters(), c.lr, c.beta1, c.beta2, c.eps)
        self.opt_D = Adam(self.D.named_parameters(), c.lr, c.beta1, c.beta2, c.eps)

    @property
    def generator(self):
        return self.G

    def modules(self):
        return {"G": self.G, "D": self.D}

    def optimizers(self):
        return {"G": self.opt_G, "D": self.opt_D}

    def generator_losses(self, cond, target, fake=None):
        """Return (total, adversarial, l1) tensors for the generator objective."""
        if fake is None:
            fake = self.G(cond)
        kind = self.config.adversarial()
        g_adv = adversarial_loss(self.D(T.concat([cond, fake], axis=1)), True, kind)
        g_l1 = T.l1_loss(fake, target)
        total = T.add(g_adv, T.mul(g_l1, float(self.config.weights.lambda_l1)))
        return total, g_adv, g_l1

    def discriminator_loss(self, cond, target, fake):
        kind = self.config.adversarial()
        real_term = adversarial_loss(self.D(T.concat([cond, target], axis=1)), True, kind)
        fake_term = adversarial_loss(self.D(T.concat([cond, fake.detach()], axis=1)), False, kind)
        return T.add(real_term, fake_term)

    def update_discriminator(self, cond, target, fake):
        d_loss = self.discriminator_loss(cond, target, fake)
        _check_finite({"d_loss": d_loss.item()}, self.iteration + 1)
        self.opt_D.zero_grad()
        T.backward(d_loss)
        self.opt_D.step()
        return d_loss.item()

    def update_generator(self, cond, target, fake):
        self.D.set_requires_grad(False)
        try:
            total, g_adv, g_l1 = self.generator_losses(cond, target, fake)
            _check_finite({"g_adv": g_adv.item(), "g_l1": g_l1.item()}, self.iteration + 1)
            self.opt_G.zero_grad()
            T.backward(total)
            self.opt_G.step()
        finally:
            self.D.set_requires_grad(True)
        return g_adv.item(), g_l1.item()

    def step(self, condition, target):
        cond = Tensor(condition)
        tgt = Tensor(target)
        if cond.shape[0] != tgt.shape[0] or cond.shape[2:] != tgt.shape[2:]:
            raise T.ContractError(f"condition {cond.shape} and target {tgt.shape} disagree")
        fake = self.G(cond)
        d_loss = self.update_discriminator(cond, tgt, fake)
        g_adv, g_l1 = self.update_generator(cond, tgt, fake)
        self.iteration += 1
        return {"d_loss": d_loss, "g_adv": g_adv, "g_l1": g_l1}


def cycle_loss(g_ab, g_ba, a, b):
    """L1 reconstruction of both domains through the round trip."""
    cyc_a = T.l1_loss(g_ba(g_ab(a)), a)
    cyc_b = T.l1_loss(g_ab(g_ba(b)), b)
    return cyc_a, cyc_b


class CycleGANTrainer(Trainer):
    """Domain A is the RGB collage (3 channels), domain B the thermal image (1 channel)."""

    arch = "cyclegan"

    def __init__(self, config, snapshot_input=None):
        super().__init__(config, snapshot_input)
        c = config
        S = c.image_side
        self.g_ab_spec = GeneratorSpec(3, 1, c.resnet_width, c.levels, c.n_blocks, S)
        self.g_ba_spec = GeneratorSpec(1, 3, c.resnet_width, c.levels, c.n_blocks, S)
        self.G_AB = build_resnet_generator(self.g_ab_spec, self.seed.child(1))
        self.G_BA = build_resnet_generator(self.g_ba_spec, self.seed.child(3))
        self.D_A = build_patchgan(DiscriminatorSpec(3, c.d_layers, c.d_width, S), self.seed.child(4))
        self.D_B = build_patchgan(DiscriminatorSpec(1, c.d_layers, c.d_width, S), self.seed.child(2))
        g_params = list(self.G_AB.named_parameters("G_AB.")) + list(self.G_BA.named_parameters("G_BA."))
        self.opt_G = Adam(g_params, c.lr, c.beta1, c.beta2, c.eps)
        self.opt_D_A = Adam(self.D_A.named_parameters(), c.lr, c.beta1, c.beta2, c.eps)
        self.opt_D_B = Adam(self.D_B.named_parameters(), c.lr, c.beta1, c.beta2, c.eps)

    @property
    def generator(self):
        return self.G_AB

    def modules(self):
        return {"G_AB": self.G_AB, "G_BA": self.G_BA, "D_A": self.D_A, "D_B": self.D_B}

    def optimizers(self):
        return {"G": self.opt_G, "D_A": self.opt_D_A, "D_B": self.opt_D_B}

    def step(self, domain_a, domain_b):
        a = Tensor(domain_a)
        b = Tensor(domain_b)
        kind = self.config.adversarial()
        lam = float(self.config.weights.lambda_cycle)
        it = self.iteration + 1

        self.D_A.set_requires_grad(False)
        self.D_B.set_requires_grad(False)
        try:
            fake_b = self.G_AB(a)
            fake_a = self.G_BA(b)
            g_ab_adv = adversarial_loss(self.D_B(fake_b), True, kind)
            g_ba_adv = adversarial_loss(self.D_A(fake_a), True, kind)
            cyc_a = T.l1_loss(self.G_BA(fake_b), a)
            cyc_b = T.l1_loss(self.G_AB(fake_a), b)
            total = T.add(T.add(g_ab_adv, g_ba_adv), T.mul(T.add(cyc_a, cyc_b), lam))
            rec = {
                "g_ab_adv": g_ab_adv.item(),
                "g_ba_adv": g_ba_adv.item(),
                "cycle_a": cyc_a.item(),
                "cycle_b": cyc_b.item(),
            }
            _check_finite(rec, it)
            self.opt_G.zero_grad()
            T.backward(total)
            self.opt_G.step()
        finally:
            self.D_A.set_requires_grad(True)
            self.D_B.set_requires_grad(True)

        d_a = T.mul(
            T.add(adversarial_loss(self.D_A(a), True, kind), adversarial_loss(self.D_A(fake_a.detach()), False, kind)),
            0.5,
        )
        d_b = T.mul(
            T.add(adversarial_loss(self.D_B(b), True, kind), adversarial_loss(self.D_B(fake_b.detach()), False, kind)),
            0.5,
        )
        _check_finite({"d_a": d_a.item(), "d_b": d_b.item()}, it)
        self.opt_D_A.zero_grad()
        T.backward(d_a)
        self.opt_D_A.step()
        self.opt_D_B.zero_grad()
        T.backward(d_b)
        self.opt_D_B.step()

        self.iteration += 1
        rec["d_a"] = d_a.item()
        rec["d_b"] = d_b.item()
        return rec


def make_trainer(config, snapshot_input=None):
    cls = Pix2PixTrainer if config.arch == "pix2pix" else CycleGANTrainer
    return cls(config, snapshot_input)


def pix2pix_step(condition, target, state, weights=None):
    if weights is not None and weights != state.config.weights:
        raise ConfigError("loss weights differ from the trainer's configuration")
    return state.step(condition, target)


def cyclegan_step(domain_a_batch, domain_b_batch, state, weights=None):
    if weights is not None and weights != state.config.weights:
        raise ConfigError("loss weights differ from the trainer's configuration")
    return state.step(domain_a_batch, domain_b_batch)


# ---------------------------------------------------------------- snapshots


@dataclass(frozen=True)
class SnapshotSchedule:
    """Snapshot every ``every`` iterations up to ``until``, plus the explicit ``at`` points.

    Points past the training budget are capped to the budget.
    """

    every: int = 10
    until: int = 60
    at: tuple = (20000,)

    @classmethod
    def parse(cls, text):
        text = text.strip()
        if text in ("early", "default"):
            return cls()
        if text in ("", "none"):
            return cls(every=0, until=0, at=())
        kw = {}
        for part in text.split(","):
            key, _, val = part.partition("=")
            key = key.strip()
            if key == "at":
                kw["at"] = tuple(int(v) for v in val.split("+") if v)
            elif key in ("every", "until"):
                kw[key] = int(val)
            else:
                raise ConfigError(f"bad snapshot schedule term {part!r}")
        return cls(**kw)

    def iterations(self, budget):
        pts = set()
        if self.every > 0:
            pts.update(range(0, min(self.until, budget) + 1, self.every))
        for a in self.at:
            pts.add(min(int(a), budget))
        return sorted(p for p in pts if 0 <= p <= budget)


def to_uint8(image):
    """Map [-1, 1] values to 8-bit codes."""
    return np.clip(np.rint((np.asarray(image, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def snapshot(state, out_dir):
    """Write the generator's output on the fixed snapshot input; returns the file path."""
    from .dataio import write_png

    if state.snapshot_input is None:
        raise ConfigError("trainer has no fixed snapshot input")
    os.makedirs(out_dir, exist_ok=True)
    img = state.generate(state.snapshot_input[:1])[0, 0]
    path = os.path.join(out_dir, f"snapshot_it{state.iteration:06d}.png")
    write_png(path, to_uint8(img))
    return path


def train(state, data, iterations, schedule=None, snapshot_dir=None, log_every=0, on_step=None):
    """Run ``iterations`` steps on ``data`` (a PairedData); returns the loss history."""
    history = []
    points = set(schedule.iterations(state.iteration + iterations)) if schedule and snapshot_dir else set()
    if state.snapshot_input is None:
        state.snapshot_input = data.conditions[:1].copy()
    end = state.iteration + iterations
    if state.iteration in points:
        snapshot(state, snapshot_dir)
    while state.iteration < end:
        a, b = state.sample_batch(data)
        rec = state.step(a, b)
        history.append(rec)
        if log_every and state.iteration % log_every == 0:
            log.info("it %d %s", state.iteration, " ".join(f"{k}={v:.4f}" for k, v in rec.items()))
        if state.iteration in points:
            snapshot(state, snapshot_dir)
        if on_step is not None:
            on_step(state, rec)
    return history
