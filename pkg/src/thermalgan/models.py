"""Generators and the PatchGAN discriminator."""

from dataclasses import asdict, dataclass

from . import tensor as T
from .nn import Conv2d, ConvTranspose2d, InstanceNorm2d, Module
from .rng import RngSeed


class ConfigError(ValueError):
    """A model or training configuration is inconsistent."""


@dataclass(frozen=True)
class GeneratorSpec:
    """Generator geometry.

    ``levels`` is used by the U-Net, ``n_blocks`` by the ResNet variant.
    The thermal generator has one output channel; CycleGAN's reverse
    generator is the only one built with three.
    """

    in_channels: int = 3
    out_channels: int = 1
    base_width: int = 32
    levels: int = 4
    n_blocks: int = 4
    image_side: int = 64

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class DiscriminatorSpec:
    in_channels: int = 4
    n_layers: int = 3
    base_width: int = 32
    image_side: int = 64

    def to_dict(self):
        return asdict(self)


def _width(base, level):
    # level 1 is the outermost; widths double per level, capped at 8x
    return base * min(2 ** (level - 1), 8)


def _seed_rng(seed):
    return seed.generator() if isinstance(seed, RngSeed) else RngSeed(int(seed)).generator()


class UNetGenerator(Module):
    """Encoder-decoder with skip concatenation at every level and a tanh head."""

    def __init__(self, spec, seed):
        super().__init__()
        if spec.levels < 1:
            raise ConfigError(f"U-Net needs at least one level, got {spec.levels}")
        if spec.image_side % (2**spec.levels):
            raise ConfigError(f"image side {spec.image_side} not divisible by 2^{spec.levels}")
        if spec.out_channels < 1 or spec.in_channels < 1:
            raise ConfigError("channel counts must be positive")
        self.spec = spec
        rng = _seed_rng(seed)
        L = spec.levels
        self.down = []
        self.down_norm = []
        cin = spec.in_channels
        for k in range(1, L + 1):
            cout = _width(spec.base_width, k)
            self.down.append(self.add_child(f"down{k}", Conv2d(rng, cin, cout, 4, 2, 1)))
            norm = InstanceNorm2d(cout) if 1 < k < L else None
            self.down_norm.append(self.add_child(f"down{k}_norm", norm) if norm else None)
            cin = cout
        self.up = [None] * L
        self.up_norm = [None] * L
        for k in range(L, 0, -1):
            enc = _width(spec.base_width, k)
            cin = enc if k == L else enc + _width(spec.base_width, k)
            cout = spec.out_channels if k == 1 else _width(spec.base_width, k - 1)
            self.up[k - 1] = self.add_child(f"up{k}", ConvTranspose2d(rng, cin, cout, 4, 2, 1))
            if k > 1:
                self.up_norm[k - 1] = self.add_child(f"up{k}_norm", InstanceNorm2d(cout))

    def decoder_input_channels(self):
        """Input channel count of each decoder level, outermost first."""
        return [up.weight.shape[0] for up in self.up]

    def encoder_output_channels(self):
        return [d.weight.shape[0] for d in self.down]

    def forward(self, x):
        if x.shape[1] != self.spec.in_channels:
            raise T.ContractError(f"generator expects {self.spec.in_channels} channels, got {x.shape}")
        skips = []
        h = x
        for k, (conv, norm) in enumerate(zip(self.down, self.down_norm), start=1):
            if k > 1:
                h = T.leaky_relu(h, 0.2)
            h = conv(h)
            if norm is not None:
                h = norm(h)
            skips.append(h)
        L = len(self.down)
        for k in range(L, 0, -1):
            if k < L:
                h = T.concat([skips[k - 1], h], axis=1)
            h = self.up[k - 1](T.relu(h))
            if k > 1:
                h = self.up_norm[k - 1](h)
        return T.tanh(h)


class ResidualBlock(Module):
    def __init__(self, rng, ch):
        super().__init__()
        self.c1 = self.add_child("conv1", Conv2d(rng, ch, ch, 3, 1, 1))
        self.n1 = self.add_child("norm1", InstanceNorm2d(ch))
        self.c2 = self.add_child("conv2", Conv2d(rng, ch, ch, 3, 1, 1))
        self.n2 = self.add_child("norm2", InstanceNorm2d(ch))

    def forward(self, x):
        h = T.relu(self.n1(self.c1(x)))
        return T.add(x, self.n2(self.c2(h)))


class ResnetGenerator(Module):
    """Two stride-2 downsamplings, residual blocks, two upsamplings, tanh head."""

    def __init__(self, spec, seed):
        super().__init__()
        if spec.image_side % 4:
            raise ConfigError(f"image side {spec.image_side} not divisible by 4")
        if spec.n_blocks < 0:
            raise ConfigError("n_blocks must be non-negative")
        self.spec = spec
        rng = _seed_rng(seed)
        w = spec.base_width
        self.stem = self.add_child("stem", Conv2d(rng, spec.in_channels, w, 7, 1, 3))
        self.stem_norm = self.add_child("stem_norm", InstanceNorm2d(w))
        self.downs = []
        for i, (a, b) in enumerate([(w, 2 * w), (2 * w, 4 * w)]):
            self.downs.append(
                (self.add_child(f"down{i}", Conv2d(rng, a, b, 3, 2, 1)), self.add_child(f"down{i}_norm", InstanceNorm2d(b)))
            )
        self.blocks = [self.add_child(f"block{i}", ResidualBlock(rng, 4 * w)) for i in range(spec.n_blocks)]
        self.ups = []
        for i, (a, b) in enumerate([(4 * w, 2 * w), (2 * w, w)]):
            self.ups.append(
                (
                    self.add_child(f"up{i}", ConvTranspose2d(rng, a, b, 4, 2, 1)),
                    self.add_child(f"up{i}_norm", InstanceNorm2d(b)),
                )
            )
        self.head = self.add_child("head", Conv2d(rng, w, spec.out_channels, 7, 1, 3))

    def forward(self, x):
        if x.shape[1] != self.spec.in_channels:
            raise T.ContractError(f"generator expects {self.spec.in_channels} channels, got {x.shape}")
        h = T.relu(self.stem_norm(self.stem(x)))
        for conv, norm in self.downs:
            h = T.relu(norm(conv(h)))
        for block in self.blocks:
            h = block(h)
        for conv, norm in self.ups:
            h = T.relu(norm(conv(h)))
        return T.tanh(self.head(h))


def patch_extent(spec):
    """Spatial side of the patch map produced for ``spec.image_side`` inputs."""
    s = spec.image_side
    for _ in range(spec.n_layers):
        s = (s + 2 - 4) // 2 + 1
    return (s + 2 - 4) // 1 + 1


class PatchGAN(Module):
    """Strided 4x4 convolutions with leaky ReLU, then a stride-1 head emitting one logit per patch."""

    def __init__(self, spec, seed):
        super().__init__()
        if spec.n_layers < 1:
            raise ConfigError("PatchGAN needs at least one strided layer")
        if patch_extent(spec) < 1:
            raise ConfigError(
                f"{spec.n_layers} strided layers on a {spec.image_side}px input leave no patch map"
            )
        self.spec = spec
        rng = _seed_rng(seed)
        self.convs = []
        self.norms = []
        cin = spec.in_channels
        for k in range(1, spec.n_layers + 1):
            cout = _width(spec.base_width, k)
            self.convs.append(self.add_child(f"conv{k}", Conv2d(rng, cin, cout, 4, 2, 1)))
            self.norms.append(self.add_child(f"conv{k}_norm", InstanceNorm2d(cout)) if k > 1 else None)
            cin = cout
        self.head = self.add_child("head", Conv2d(rng, cin, 1, 4, 1, 1))

    def features(self, x):
        """Activations before the head, for receptive-field audits."""
        h = x
        for conv, norm in zip(self.convs, self.norms):
            h = conv(h)
            if norm is not None:
                h = norm(h)
            h = T.leaky_relu(h, 0.2)
        return h

    def forward(self, x):
        if x.shape[1] != self.spec.in_channels:
            raise T.ContractError(f"discriminator expects {self.spec.in_channels} channels, got {x.shape}")
        return self.head(self.features(x))


def build_unet_generator(spec, seed):
    return UNetGenerator(spec, seed)


def build_resnet_generator(spec, seed):
    return ResnetGenerator(spec, seed)


def build_patchgan(spec, seed):
    return PatchGAN(spec, seed)
