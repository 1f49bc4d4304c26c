"""U-net presets and the reconstruction, generator, critic and posterior networks."""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import engine as E
from .radon import ScanGeometry, _padded_length, circle_mask, ramlak_kernel
from .sensor import SIGMA_FLOOR


@dataclass(frozen=True)
class UNetPreset:
    """Residual-block counts per U-net block, down path (full resolution first) then up path."""

    name: str
    base_channels: int
    down: tuple[int, ...]
    up: tuple[int, ...]
    desk: bool = False

    def __post_init__(self):
        if len(self.up) != len(self.down) - 1:
            raise ValueError(f"{self.name}: up path must have one block fewer than down path")

    @property
    def levels(self) -> int:
        return len(self.down)

    def channels(self, level: int) -> int:
        # doubled every two strided convolutions; level i sits after i of them
        return self.base_channels * 2 ** (level // 2)

    def blocks_per_resolution(self, full_res: int = 256) -> list[tuple[int, int]]:
        down = [(full_res >> i, n) for i, n in enumerate(self.down)]
        up = [(full_res >> (self.levels - 2 - j), n) for j, n in enumerate(self.up)]
        return down + up


PRESETS = {
    p.name: p
    for p in (
        UNetPreset("XXS", 32, (1, 1, 2), (2, 1)),
        UNetPreset("XS", 32, (1, 1, 1, 2), (2, 2, 2)),
        UNetPreset("S", 32, (1, 1, 1, 2, 2), (2, 2, 2, 2)),
        UNetPreset("S-64", 64, (1, 1, 1, 2, 2), (2, 2, 2, 2)),
        UNetPreset("M", 64, (2, 1, 1, 1, 1, 2), (2, 2, 2, 2, 2)),
        UNetPreset("L", 64, (2, 2, 2, 2, 2, 3), (3, 3, 3, 3, 4)),
        UNetPreset("XL", 64, (3, 3, 3, 3, 3, 5), (4, 4, 4, 4, 4)),
        UNetPreset("XXL", 64, (5, 5, 5, 5, 5, 9), (6, 6, 6, 6, 6)),
        # desk-scale additions: T16 bottoms out at N/4, T32 at N/8
        UNetPreset("T16", 16, (1, 1, 1), (1, 1), desk=True),
        UNetPreset("T32", 16, (1, 1, 1, 1), (1, 1, 1), desk=True),
    )
}


def get_preset(name) -> UNetPreset:
    if isinstance(name, UNetPreset):
        return name
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# --- layers ----------------------------------------------------------------------------


class Conv(nn.Module):
    def __init__(self, cin, cout, k=3, stride=1, gain=1.0):
        super().__init__()
        self.stride, self.padding = stride, k // 2
        fan_in = cin * k * k
        self.weight = nn.Parameter(torch.randn(cout, cin, k, k) * (gain * math.sqrt(2.0 / fan_in)))
        self.bias = nn.Parameter(torch.zeros(cout))

    def forward(self, x):
        return E.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class PReLU(nn.Module):
    def __init__(self, channels, init=0.25):
        super().__init__()
        self.slope = nn.Parameter(torch.full((channels,), init))

    def forward(self, x):
        return E.prelu(x, self.slope)


class ResBlock(nn.Module):
    """conv3x3 -> PReLU -> conv3x3, plus identity."""

    def __init__(self, ch):
        super().__init__()
        self.conv1 = Conv(ch, ch)
        self.act = PReLU(ch)
        self.conv2 = Conv(ch, ch, gain=0.1)

    def forward(self, x):
        return x + self.conv2(self.act(self.conv1(x)))


class ChannelAttention(nn.Module):
    """Squeeze-and-excitation gating: pool -> C/r -> PReLU -> C -> sigmoid."""

    def __init__(self, ch, reduction=8):
        super().__init__()
        hidden = max(1, ch // reduction)
        self.w1 = nn.Parameter(torch.randn(hidden, ch) / math.sqrt(ch))
        self.b1 = nn.Parameter(torch.zeros(hidden))
        self.act = PReLU(hidden)
        self.w2 = nn.Parameter(torch.randn(ch, hidden) / math.sqrt(hidden))
        self.b2 = nn.Parameter(torch.zeros(ch))

    def gates(self, x):
        h = E.linear(E.global_avg_pool(x), self.w1, self.b1)
        h = self.act(h)
        return E.sigmoid(E.linear(h, self.w2, self.b2))

    def forward(self, x):
        return x * self.gates(x)[:, :, None, None]


def _res_stack(ch, n):
    return nn.Sequential(*[ResBlock(ch) for _ in range(n)])


class DownBlock(nn.Module):
    def __init__(self, cin, cout, n_res, stride):
        super().__init__()
        self.conv = Conv(cin, cout, 3, stride)
        self.res = _res_stack(cout, n_res)

    def forward(self, x):
        return self.res(self.conv(x))


class UpBlock(nn.Module):
    def __init__(self, prev_ch, skip_ch, cout, n_res):
        super().__init__()
        self.attention = ChannelAttention(prev_ch + skip_ch)
        self.shrink = Conv(prev_ch + skip_ch, cout, 1)
        self.res = _res_stack(cout, n_res)
        self.out_channels = cout

    def forward(self, prev, skip, z=None):
        x = E.concat([E.bilinear_upsample(prev, size=skip.shape[-2:]), skip])
        return self.res(self.shrink(self.attention(x)))


class LatentBlock(nn.Module):
    """Up block that injects the latent z.

    concat(upsampled prev, skip) -> conv3x3 -> PReLU; the last ``z_ch``
    channels pass through exp and scale the bilinearly upscaled z, which is
    concatenated back with the remaining channels before the residual blocks.
    """

    def __init__(self, prev_ch, skip_ch, cout, n_res, z_ch):
        super().__init__()
        self.z_ch = z_ch
        self.conv = Conv(prev_ch + skip_ch, cout + z_ch)
        self.act = PReLU(cout + z_ch)
        self.res = _res_stack(cout + z_ch, n_res)
        self.out_channels = cout + z_ch

    def forward(self, prev, skip, z=None):
        if z is None:
            raise ValueError("latent block requires z")
        x = E.concat([E.bilinear_upsample(prev, size=skip.shape[-2:]), skip])
        h = self.act(self.conv(x))
        feats, gate_logits = E.split(h, [h.shape[1] - self.z_ch, self.z_ch])
        zz = E.bilinear_upsample(z, size=skip.shape[-2:])
        return self.res(E.concat([feats, E.exp_activation(gate_logits) * zz]))


class UNet(nn.Module):
    """Down blocks (first at full resolution, the rest strided), up blocks with
    attention-weighted skip fusion, and a readout conv fed by the input, the
    first block and the last up block."""

    def __init__(self, preset, in_ch, out_ch, z_channels: int | None = None):
        super().__init__()
        p = get_preset(preset)
        self.preset = p
        self.down = nn.ModuleList()
        c_prev = in_ch
        for i, n in enumerate(p.down):
            self.down.append(DownBlock(c_prev, p.channels(i), n, 1 if i == 0 else 2))
            c_prev = p.channels(i)
        self.up = nn.ModuleList()
        self.latent_index = None
        if z_channels is not None:
            if len(p.up) < 3:
                raise ValueError(f"preset {p.name} has fewer than three up blocks; cannot host z")
            self.latent_index = len(p.up) - 3
        for j, n in enumerate(p.up):
            level = p.levels - 2 - j
            if j == self.latent_index:
                blk = LatentBlock(c_prev, p.channels(level), p.channels(level), n, z_channels)
            else:
                blk = UpBlock(c_prev, p.channels(level), p.channels(level), n)
            self.up.append(blk)
            c_prev = blk.out_channels
        self.readout = Conv(in_ch + p.channels(0) + c_prev, out_ch)

    def check_input(self, h, w):
        f = 2 ** (self.preset.levels - 1)
        if h % f or w % f or h // f < 2 or w // f < 2:
            raise ValueError(
                f"preset {self.preset.name} needs both sides divisible by {f} and >= {2 * f}, got {h}x{w}"
            )

    def forward(self, x, z=None):
        self.check_input(*x.shape[-2:])
        skips = []
        h = x
        for blk in self.down:
            h = blk(h)
            skips.append(h)
        for j, blk in enumerate(self.up):
            h = blk(h, skips[-2 - j], z if j == self.latent_index else None)
        return self.readout(E.concat([x, skips[0], h]))


def build_unet(preset, in_ch, out_ch, input_size: int | None = None) -> UNet:
    net = UNet(preset, in_ch, out_ch)
    if input_size is not None:
        net.check_input(input_size, input_size)
    return net


@torch.no_grad()
def positional_features(n: int, dtype=torch.float32) -> torch.Tensor:
    """(4, n, n): x, y in (-0.5, 0.5), radius / (n/2) clipped to 1, angle / pi."""
    c = (np.arange(n) + 0.5) / n - 0.5
    x = np.broadcast_to(c[None, :], (n, n))
    y = np.broadcast_to(-c[:, None], (n, n))
    r = np.minimum(np.hypot(x, y) / 0.5, 1.0)
    a = np.arctan2(y, x) / np.pi
    return torch.tensor(np.stack([x, y, r, a]), dtype=dtype)


def naive_inverse(r: torch.Tensor, s, k: float) -> torch.Tensor:
    """``s - log(k r + 1/2)``: the sinogram a noiseless sensor would imply."""
    r = r.to(torch.get_default_dtype()) if not r.is_floating_point() else r
    s = torch.as_tensor(s, dtype=r.dtype).reshape(-1, 1, 1, 1)
    return s - torch.log(k * r + 0.5)


def ramp_matrix(n_detectors: int, dtype=torch.float32) -> torch.Tensor:
    """Toeplitz form of the zero-padded Ram-Lak filter; ``s @ H`` equals ``radon.ramp_filter(s)``."""
    h = ramlak_kernel(_padded_length(n_detectors))
    lag = np.abs(np.arange(n_detectors)[:, None] - np.arange(n_detectors)[None, :])
    return torch.tensor(h[lag], dtype=dtype)


def reading_features(r: torch.Tensor, s, b: int, k: float, ramp: torch.Tensor) -> torch.Tensor:
    """Three channels: ramp-filtered naive inverse, the naive inverse itself and
    a log-count channel in [0, 1]."""
    y0 = naive_inverse(r, s, k)
    r = r.to(y0.dtype)
    log_count = torch.log1p(k * r) / math.log1p(k * (2**b - 1))
    return E.concat([y0 @ ramp.to(y0.dtype), y0 / 8.0, log_count])


# --- models ----------------------------------------------------------------------------


class ReconstructionNet(nn.Module):
    """g2(A^T g1(r)), optionally with a latent z injected into g2.

    Readings enter with their log intensity ``s``.  One path through the
    embedding, the g1 readout and the g2 readout starts as an identity on the
    ramp-filtered naive inverse, so an untrained model already returns FBP of
    ``s - log(k r + 1/2)`` and training learns the correction.
    """

    def __init__(self, geometry: ScanGeometry, g1="T16", g2="T32", bridge_channels=16,
                 noise_b=16, noise_k=1.0, z_shape=None):
        super().__init__()
        self.geometry = geometry
        self.g1_name, self.g2_name = get_preset(g1).name, get_preset(g2).name
        self.bridge_channels = bridge_channels
        self.noise_b, self.noise_k = int(noise_b), float(noise_k)
        self.z_shape = tuple(z_shape) if z_shape is not None else None
        self.kind = "generator" if self.z_shape else "end2end"
        c_emb = get_preset(g1).base_channels
        self.embed = Conv(3, c_emb)
        self.g1 = UNet(g1, c_emb, bridge_channels)
        self.g2 = UNet(g2, bridge_channels + 4, 1, z_channels=self.z_shape[0] if self.z_shape else None)
        self.g1.check_input(*geometry.sinogram_shape)
        self.g2.check_input(*geometry.image_shape)
        if self.z_shape:
            level = get_preset(g2).levels - 2 - self.g2.latent_index
            res = geometry.image_size >> level
            if len(self.z_shape) != 3 or self.z_shape[1] > res or self.z_shape[2] > res:
                raise ValueError(f"z shape {self.z_shape} incompatible with latent block resolution {res}")
        # A^T of a constant sinogram becomes that constant
        self.bridge_scale = 1.0 / (geometry.n_angles * geometry.pixel_spacing)
        self.register_buffer("ramp", ramp_matrix(geometry.n_detectors, torch.float64), persistent=False)
        self.register_buffer("pos", positional_features(geometry.image_size), persistent=False)
        self.register_buffer("mask", torch.tensor(circle_mask(geometry.image_size)), persistent=False)
        self._init_fbp_path()

    @torch.no_grad()
    def _init_fbp_path(self):
        # FBP = pi / (2 n_angles spacing^2) A^T ramp(y) = bridge_scale A^T (gain ramp(y))
        gain = math.pi / (2.0 * self.geometry.pixel_spacing)
        for conv, w in ((self.embed, 1.0), (self.g1.readout, gain), (self.g2.readout, 1.0)):
            conv.weight[0].zero_()
            conv.bias[0] = 0.0
            conv.weight[0, 0, 1, 1] = w

    def bridge(self, r, s):
        feats = reading_features(r, s, self.noise_b, self.noise_k, self.ramp)
        sino = self.g1(self.embed(feats))
        return E.radon_backproject_node(sino, self.geometry) * self.bridge_scale

    def forward(self, r, s, z=None):
        x = self.bridge(r, s)
        pos = self.pos.to(x.dtype).expand(x.shape[0], -1, -1, -1)
        out = self.g2(E.concat([x, pos]), z)
        return out * self.mask.to(out.dtype)

    def descriptor(self) -> dict:
        d = {
            "kind": self.kind, "g1": self.g1_name, "g2": self.g2_name,
            "bridge_channels": self.bridge_channels, "noise_b": self.noise_b, "noise_k": self.noise_k,
        }
        if self.z_shape:
            d["z_shape"] = ",".join(map(str, self.z_shape))
        return d | _geometry_dict(self.geometry)


def build_end2end(p1, p2, bridge_channels, geometry, noise_b=16, noise_k=1.0) -> ReconstructionNet:
    return ReconstructionNet(geometry, p1, p2, bridge_channels, noise_b, noise_k)


def build_generator(p1, p2, geometry, z_shape, bridge_channels=16, noise_b=16, noise_k=1.0) -> ReconstructionNet:
    return ReconstructionNet(geometry, p1, p2, bridge_channels, noise_b, noise_k, z_shape=z_shape)


class SNConv(nn.Module):
    """Convolution whose kernel is spectrally normalized on every forward pass."""

    def __init__(self, cin, cout, k=3, stride=1, n_power_iters=5):
        super().__init__()
        self.stride, self.padding, self.n_power_iters = stride, k // 2, n_power_iters
        self.weight = nn.Parameter(torch.randn(cout, cin, k, k) * math.sqrt(2.0 / (cin * k * k)))
        self.bias = nn.Parameter(torch.zeros(cout))
        self.register_buffer("u", E.warm_start_u(self.weight))

    def normalized_weight(self):
        iters = self.n_power_iters if self.training else 0
        return E.spectral_normalize(self.weight, self.u, iters)[0]

    def forward(self, x):
        return E.conv2d(x, self.normalized_weight(), self.bias, self.stride, self.padding)


class SNLinear(SNConv):
    def __init__(self, cin, cout, n_power_iters=5):
        nn.Module.__init__(self)
        self.n_power_iters = n_power_iters
        self.weight = nn.Parameter(torch.randn(cout, cin) / math.sqrt(cin))
        self.bias = nn.Parameter(torch.zeros(cout))
        self.register_buffer("u", E.warm_start_u(self.weight))

    def forward(self, x):
        return E.linear(x, self.normalized_weight(), self.bias)


class Critic(nn.Module):
    """Stride-2 spectrally normalized conv stack -> global average pool -> scalar.

    PReLU slopes are clamped to [0, 1] in the forward pass so every activation
    stays 1-Lipschitz.
    """

    kind = "discriminator"

    def __init__(self, channels=16, depth=5, max_channels=128):
        super().__init__()
        self.channels, self.depth = channels, depth
        self.convs = nn.ModuleList()
        self.slopes = nn.ParameterList()
        cin = 1
        for i in range(depth):
            cout = min(channels * 2**i, max_channels)
            self.convs.append(SNConv(cin, cout, 3, 2))
            self.slopes.append(nn.Parameter(torch.full((cout,), 0.25)))
            cin = cout
        self.head = SNLinear(cin, 1)

    def forward(self, x):
        h = x
        for conv, slope in zip(self.convs, self.slopes):
            h = E.prelu(conv(h), slope.clamp(0.0, 1.0))
        return self.head(E.global_avg_pool(h))[:, 0]

    def sn_layers(self):
        return [*self.convs, self.head]

    def descriptor(self) -> dict:
        return {"kind": self.kind, "channels": self.channels, "depth": self.depth}


def build_discriminator(channels=16, depth=5) -> Critic:
    return Critic(channels, depth)


class PosteriorNet(nn.Module):
    """Readings -> per-entry Gaussian posterior over the sinogram.

    The mean head predicts a correction to the naive inverse
    ``s - log(k r + 1/2)``; the sigma head ends in exp plus ``SIGMA_FLOOR``.
    ``kind`` selects the heads: ``mu``, ``sigma`` or ``joint`` (both).
    """

    def __init__(self, kind="joint", noise_b=16, noise_k=1.0, channels=32, n_res=2):
        super().__init__()
        if kind not in ("mu", "sigma", "joint"):
            raise ValueError(f"unknown posterior kind {kind!r}")
        self.kind = "posterior_" + kind
        self.head_kind = kind
        self.noise_b, self.noise_k = int(noise_b), float(noise_k)
        self.channels, self.n_res = channels, n_res
        self.stem = nn.Sequential(Conv(3, channels, 1), PReLU(channels), Conv(channels, channels, 1), PReLU(channels))
        self.trunk = _res_stack(channels, n_res)
        self.mu_head = Conv(channels, 1, 1, gain=0.1) if kind in ("mu", "joint") else None
        self.sigma_head = Conv(channels, 1, 1, gain=0.1) if kind in ("sigma", "joint") else None

    def features(self, r, s):
        r = r.to(torch.get_default_dtype()) if not r.is_floating_point() else r
        s = torch.as_tensor(s, dtype=r.dtype).reshape(-1, 1, 1, 1).expand_as(r)
        naive = s - torch.log(self.noise_k * r + 0.5)
        r_max = 2**self.noise_b - 1
        log_count = torch.log(self.noise_k * r + 0.5) / math.log(self.noise_k * r_max + 0.5)
        return E.concat([r / r_max, log_count, s / 10.0]), naive

    def forward(self, r, s):
        """Returns ``(mu, sigma)``; the head a model lacks is ``None``."""
        feats, naive = self.features(r, s)
        h = self.trunk(self.stem(feats))
        mu = naive + self.mu_head(h) if self.mu_head is not None else None
        sigma = E.exp_activation(self.sigma_head(h)) + SIGMA_FLOOR if self.sigma_head is not None else None
        return mu, sigma

    def descriptor(self) -> dict:
        return {"kind": self.kind, "noise_b": self.noise_b, "noise_k": self.noise_k,
                "channels": self.channels, "n_res": self.n_res}


def build_posterior_net(kind="joint", noise_b=16, noise_k=1.0, channels=32, n_res=2) -> PosteriorNet:
    return PosteriorNet(kind, noise_b, noise_k, channels, n_res)


# --- descriptors ----------------------------------------------------------------------------


def _geometry_dict(g: ScanGeometry) -> dict:
    return {"image_size": g.image_size, "n_angles": g.n_angles, "n_detectors": g.n_detectors,
            "pixel_spacing": g.pixel_spacing}


def descriptor_text(model: nn.Module) -> str:
    cp = configparser.ConfigParser()
    cp["model"] = {k: str(v) for k, v in model.descriptor().items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def build_from_descriptor(text: str) -> nn.Module:
    cp = configparser.ConfigParser()
    cp.read_string(text)
    d = cp["model"]
    kind = d["kind"]
    if kind in ("end2end", "generator"):
        g = ScanGeometry(d.getint("image_size"), d.getint("n_angles"), d.getint("n_detectors"),
                         d.getfloat("pixel_spacing"))
        z = tuple(int(v) for v in d["z_shape"].split(",")) if "z_shape" in d else None
        return ReconstructionNet(g, d["g1"], d["g2"], d.getint("bridge_channels"), d.getint("noise_b"),
                                 d.getfloat("noise_k"), z_shape=z)
    if kind == "discriminator":
        return Critic(d.getint("channels"), d.getint("depth"))
    if kind.startswith("posterior_"):
        return PosteriorNet(kind.removeprefix("posterior_"), d.getint("noise_b"), d.getfloat("noise_k"),
                            d.getint("channels"), d.getint("n_res"))
    raise ValueError(f"unknown model kind {kind!r}")


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
