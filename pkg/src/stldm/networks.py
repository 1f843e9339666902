"""VAE, gSTA translator and the spatio-temporal latent denoiser.

Shapes follow ``[B, T, C, H, W]`` throughout; convolutions see frames folded into the
batch axis and the attention blocks unfold them again as needed.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .schedule import DiffusionSchedule, build_schedule


@dataclass(frozen=True)
class ModelDims:
    M: int = 4
    N: int = 4
    H: int = 32
    W: int = 32
    Cz: int = 16
    base_channels: int = 32
    depth: int = 2
    patch0: int = 4
    vae_channels: int = 16
    translator_channels: int = 64
    translator_blocks: int = 4
    channel_mult: tuple = (1, 2)
    temporal_attention: bool = True

    def __post_init__(self):
        object.__setattr__(self, "channel_mult", tuple(self.channel_mult))
        for name in ("M", "N", "H", "W", "Cz", "base_channels", "depth", "patch0",
                     "vae_channels", "translator_channels", "translator_blocks"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.H % 4 or self.W % 4:
            raise ValueError(f"H and W must be divisible by 4, got {self.H}x{self.W}")
        if len(self.channel_mult) != self.depth:
            raise ValueError("channel_mult needs one entry per level")
        if self.hz % (2 ** self.depth) or self.wz % (2 ** self.depth):
            raise ValueError("latent size must halve cleanly at every level")
        for level in range(self.depth):
            p = self.patch_at(level)
            if p < 1:
                raise ValueError(f"patch size reaches 0 at level {level}")
            if (self.hz >> level) % p or (self.wz >> level) % p:
                raise ValueError(f"patch {p} does not tile level {level}")

    @property
    def hz(self) -> int:
        return self.H // 4

    @property
    def wz(self) -> int:
        return self.W // 4

    def patch_at(self, level: int) -> int:
        return self.patch0 >> level if self.patch0 % (2 ** level) == 0 else 0

    def to_dict(self) -> dict:
        return asdict(self)


def _groups(channels: int, preferred: int) -> int:
    return math.gcd(channels, preferred)


def fold(x: torch.Tensor) -> torch.Tensor:
    b, t = x.shape[:2]
    return x.reshape(b * t, *x.shape[2:])


def unfold(x: torch.Tensor, b: int) -> torch.Tensor:
    return x.reshape(b, x.shape[0] // b, *x.shape[1:])


# --------------------------------------------------------------------------- VAE


class ChannelConv(nn.Module):
    """3x3 conv, GroupNorm with 2 groups, leaky ReLU."""

    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.norm = nn.GroupNorm(_groups(cout, 2), cout)

    def forward(self, x):
        return F.leaky_relu(self.norm(self.conv(x)), 0.2)


class Upsample2x(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = nn.ConvTranspose2d(channels, channels, 4, stride=2, padding=1)
        self.norm = nn.GroupNorm(_groups(channels, 2), channels)

    def forward(self, x):
        return F.leaky_relu(self.norm(self.conv(x)), 0.2)


class Encoder(nn.Module):
    LOGVAR_RANGE = (-30.0, 20.0)

    def __init__(self, dims: ModelDims):
        super().__init__()
        c = dims.vae_channels
        self.body = nn.Sequential(
            ChannelConv(1, c), ChannelConv(c, c, stride=2),
            ChannelConv(c, c), ChannelConv(c, c, stride=2),
        )
        self.mu = nn.Conv2d(c, dims.Cz, 1)
        self.logvar = nn.Conv2d(c, dims.Cz, 1)

    def forward(self, x):
        h = self.body(x)
        return self.mu(h), self.logvar(h).clamp(*self.LOGVAR_RANGE)


class Decoder(nn.Module):
    def __init__(self, dims: ModelDims):
        super().__init__()
        c = dims.vae_channels
        self.body = nn.Sequential(
            nn.Conv2d(dims.Cz, c, 1),
            Upsample2x(c), ChannelConv(c, c),
            Upsample2x(c), ChannelConv(c, c),
        )
        self.out = nn.Conv2d(c, 1, 1)

    def forward(self, z):
        return self.out(self.body(z))


# ---------------------------------------------------------------------- Translator


class GSTABlock(nn.Module):
    """Large-kernel gated block: depth-wise 5x5, dilated depth-wise 7x7 (d=3), point-wise gate."""

    def __init__(self, channels):
        super().__init__()
        self.norm = nn.GroupNorm(1, channels)
        self.dw = nn.Conv2d(channels, channels, 5, padding=2, groups=channels)
        self.dw_dilated = nn.Conv2d(channels, channels, 7, padding=9, dilation=3, groups=channels)
        self.pw = nn.Conv2d(channels, 2 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def gate(self, x):
        a = self.dw_dilated(self.dw(self.norm(x)))
        g, v = self.pw(a).chunk(2, dim=1)
        return torch.sigmoid(g) * v

    def forward(self, x):
        return x + self.proj(F.gelu(self.gate(x)))


class Translator(nn.Module):
    """Maps M latent frames to N by folding time into channels (SimVP style)."""

    def __init__(self, dims: ModelDims):
        super().__init__()
        self.dims = dims
        c = dims.translator_channels
        self.inp = nn.Conv2d(dims.M * dims.Cz, c, 1)
        self.blocks = nn.Sequential(*[GSTABlock(c) for _ in range(dims.translator_blocks)])
        self.mean = nn.Conv2d(c, dims.N * dims.Cz, 1)
        self.logvar = nn.Conv2d(c, dims.N * dims.Cz, 1)

    def forward(self, z):
        b, t, cz, h, w = z.shape
        if t != self.dims.M:
            raise ValueError(f"translator expects {self.dims.M} frames, got {t}")
        x = self.blocks(self.inp(z.reshape(b, t * cz, h, w)))
        shape = (b, self.dims.N, cz, h, w)
        logvar = self.logvar(x).clamp(*Encoder.LOGVAR_RANGE)
        return self.mean(x).reshape(shape), logvar.reshape(shape)


# ------------------------------------------------------------------------ attention


def feature_map(x):
    return F.elu(x) + 1.0


def linear_attention(q, k, v, order: str = "linear"):
    """Feature-mapped attention on ``[..., L, d]`` tensors.

    ``order="linear"`` evaluates φ(Q)(φ(K)ᵀφ(V)) in O(L d²); ``order="standard"`` builds the
    L x L matrix first. Rows are normalised by φ(Q)(φ(K)ᵀ1) either way.
    """
    q, k, v = feature_map(q), feature_map(k), feature_map(v)
    if order == "linear":
        num = q @ (k.transpose(-2, -1) @ v)
        den = q @ k.sum(dim=-2, keepdim=True).transpose(-2, -1)
    elif order == "standard":
        scores = q @ k.transpose(-2, -1)
        num = scores @ v
        den = scores.sum(dim=-1, keepdim=True)
    else:
        raise ValueError(f"unknown evaluation order {order!r}")
    return num / den


def softmax_attention(q, k, v):
    scale = q.shape[-1] ** -0.5
    return torch.softmax((q @ k.transpose(-2, -1)) * scale, dim=-1) @ v


def patchify(x: torch.Tensor, p: int) -> torch.Tensor:
    """[B, C, h, w] -> [B, n_patches, p*p, C]."""
    b, c, h, w = x.shape
    if h % p or w % p:
        raise ValueError(f"patch size {p} does not divide {h}x{w}")
    x = x.reshape(b, c, h // p, p, w // p, p).permute(0, 2, 4, 3, 5, 1)
    return x.reshape(b, (h // p) * (w // p), p * p, c)


def unpatchify(x: torch.Tensor, p: int, h: int, w: int) -> torch.Tensor:
    b, _, _, c = x.shape
    x = x.reshape(b, h // p, w // p, p, p, c).permute(0, 5, 1, 3, 2, 4)
    return x.reshape(b, c, h, w)


class _AttentionBase(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels, 8), channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.out = nn.Conv2d(channels, channels, 1)


class SpatialAttention(_AttentionBase):
    """Softmax attention over all pixels of each frame (time folded into batch)."""

    def forward(self, x):
        b, t, c, h, w = x.shape
        f = fold(x)
        q, k, v = self.qkv(self.norm(f)).reshape(b * t, 3, c, h * w).transpose(-2, -1).unbind(1)
        a = softmax_attention(q, k, v).transpose(-2, -1).reshape(b * t, c, h, w)
        return x + unfold(self.out(a), b)


class LinearSpatialAttention(_AttentionBase):
    """Linearised attention where each p x p patch acts as an independent head."""

    def __init__(self, channels, patch):
        super().__init__(channels)
        self.patch = patch

    def forward(self, x):
        b, t, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(fold(x))).chunk(3, dim=1)
        p = self.patch
        a = linear_attention(patchify(q, p), patchify(k, p), patchify(v, p))
        return x + unfold(self.out(unpatchify(a, p, h, w)), b)


def frame_encoding(t: int, channels: int, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal encoding of frame index, [t, channels]."""
    pos = torch.arange(t, dtype=torch.float64)[:, None]
    i = torch.arange(channels, dtype=torch.float64)[None, :]
    angle = pos / (100.0 ** ((i - i % 2) / max(channels, 1)))
    return torch.where(i % 2 == 0, angle.sin(), angle.cos()).to(dtype)


class TemporalAttention(nn.Module):
    """Softmax attention across frames at every pixel: [b, t, c, h, w] -> [b*h*w, t, c]."""

    def __init__(self, channels):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels, 8), channels)
        self.qk = nn.Linear(channels, 2 * channels)
        self.v = nn.Linear(channels, channels)
        self.out = nn.Linear(channels, channels)

    def forward(self, x):
        b, t, c, h, w = x.shape
        n = unfold(self.norm(fold(x)), b).permute(0, 3, 4, 1, 2).reshape(b * h * w, t, c)
        q, k = self.qk(n + frame_encoding(t, c, n.dtype)).chunk(2, dim=-1)
        a = self.out(softmax_attention(q, k, self.v(n)))
        return x + a.reshape(b, h, w, t, c).permute(0, 3, 4, 1, 2)


def spatial_attention(x, module: SpatialAttention | None = None):
    return (module or SpatialAttention(x.shape[2]).to(x.dtype))(x)


def linear_spatial_attention(x, p: int, module: LinearSpatialAttention | None = None):
    return (module or LinearSpatialAttention(x.shape[2], p).to(x.dtype))(x)


def temporal_attention(x, module: TemporalAttention | None = None):
    return (module or TemporalAttention(x.shape[2]).to(x.dtype))(x)


# ------------------------------------------------------------------------ denoiser


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.double()[:, None] * freqs[None]
    emb = torch.cat([args.sin(), args.cos()], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    """Two (3x3 conv, GroupNorm(8), SiLU) sub-blocks and a 1x1 channel conversion."""

    def __init__(self, cin, cout, temb):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = nn.GroupNorm(_groups(cout, 8), cout)
        self.temb = nn.Linear(temb, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(cout, 8), cout)
        self.proj = nn.Conv2d(cout, cout, 1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        # x: [B*T, C, h, w]; emb: [B*T, temb]
        h = F.silu(self.norm1(self.conv1(x)))
        h = h + self.temb(F.silu(emb))[:, :, None, None]
        h = F.silu(self.norm2(self.conv2(h)))
        return self.proj(h) + self.skip(x)


class DownBlock(nn.Module):
    def __init__(self, cin, cout, cz, temb, patch, temporal):
        super().__init__()
        self.res1 = ResBlock(cin + cz, cout, temb)
        self.res2 = ResBlock(cout, cout, temb)
        self.lattn = LinearSpatialAttention(cout, patch)
        self.tattn = TemporalAttention(cout) if temporal else None
        self.down = nn.Conv2d(cout, cout, 4, stride=2, padding=1)

    def forward(self, x, cond, emb, b):
        h = self.res2(self.res1(torch.cat([x, cond], dim=1), emb), emb)
        h = self.lattn(unfold(h, b))
        if self.tattn is not None:
            h = self.tattn(h)
        skip = fold(h)
        return self.down(skip), skip


class UpBlock(nn.Module):
    def __init__(self, cin, cskip, cout, temb, patch, temporal):
        super().__init__()
        self.up = nn.ConvTranspose2d(cin, cin, 4, stride=2, padding=1)
        self.res1 = ResBlock(cin + cskip, cout, temb)
        self.res2 = ResBlock(cout, cout, temb)
        self.lattn = LinearSpatialAttention(cout, patch)
        self.tattn = TemporalAttention(cout) if temporal else None

    def forward(self, x, skip, emb, b):
        h = torch.cat([self.up(x), skip], dim=1)
        h = self.res2(self.res1(h, emb), emb)
        h = self.lattn(unfold(h, b))
        if self.tattn is not None:
            h = self.tattn(h)
        return fold(h)


class Denoiser(nn.Module):
    """U-shaped ε-predictor over latent sequences, conditioned by channel concatenation."""

    def __init__(self, dims: ModelDims):
        super().__init__()
        self.dims = dims
        base, cz, temporal = dims.base_channels, dims.Cz, dims.temporal_attention
        temb = 4 * base
        self.time_mlp = nn.Sequential(nn.Linear(base, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.inp = nn.Conv2d(cz, base, 3, padding=1)
        chans = [base * m for m in dims.channel_mult]
        self.downs = nn.ModuleList()
        cin = base
        for level, c in enumerate(chans):
            self.downs.append(DownBlock(cin, c, cz, temb, dims.patch_at(level), temporal))
            cin = c
        mid = chans[-1]
        self.mid_res1 = ResBlock(mid, mid, temb)
        self.mid_sattn = SpatialAttention(mid)
        self.mid_tattn = TemporalAttention(mid) if temporal else None
        self.mid_res2 = ResBlock(mid, mid, temb)
        self.ups = nn.ModuleList()
        for level in reversed(range(dims.depth)):
            c = chans[level]
            cout = chans[level - 1] if level > 0 else base
            self.ups.append(UpBlock(cin, c, cout, temb, dims.patch_at(level), temporal))
            cin = cout
        self.out_norm = nn.GroupNorm(_groups(base, 8), base)
        self.out = nn.Conv2d(base, cz, 3, padding=1)

    def forward(self, z, t, cond=None, alpha_bar=None):
        """ε̂ for noisy latents ``z``. With ``alpha_bar`` (ᾱ_t per batch item) the raw output F
        is preconditioned as sqrt(ᾱ) F + sqrt(1 - ᾱ) z, so pure noise maps to itself."""
        if cond is None:
            cond = torch.zeros_like(z)
        if cond.shape != z.shape:
            raise ValueError(f"condition shape {tuple(cond.shape)} != input {tuple(z.shape)}")
        b, n = z.shape[:2]
        t = torch.as_tensor(t, device=z.device)
        if t.ndim == 0:
            t = t.expand(b)
        emb = self.time_mlp(timestep_embedding(t, self.dims.base_channels).to(z.dtype))
        emb = emb.repeat_interleave(n, dim=0)

        h = self.inp(fold(z))
        c = fold(cond)
        skips = []
        for level, block in enumerate(self.downs):
            c_level = F.avg_pool2d(c, 2 ** level) if level else c
            h, skip = block(h, c_level, emb, b)
            skips.append(skip)
        h = self.mid_res1(h, emb)
        h5 = self.mid_sattn(unfold(h, b))
        if self.mid_tattn is not None:
            h5 = self.mid_tattn(h5)
        h = self.mid_res2(fold(h5), emb)
        for block in self.ups:
            h = block(h, skips.pop(), emb, b)
        h = unfold(self.out(F.silu(self.out_norm(h))), b)
        if alpha_bar is None:
            return h
        ab = alpha_bar.to(z.dtype).reshape(b, 1, 1, 1, 1)
        return ab.sqrt() * h + (1 - ab).sqrt() * z


# --------------------------------------------------------------------------- model


class STLDM(nn.Module):
    """VAE + translator + denoiser. Pixel tensors are normalised ``[B, T, 1, H, W]``."""

    def __init__(self, dims: ModelDims, schedule: DiffusionSchedule | None = None):
        super().__init__()
        self.dims = dims
        self.schedule = schedule if schedule is not None else build_schedule(1000)
        self.register_buffer("alpha_bars", self.schedule.alpha_bars.clone(), persistent=False)
        self.encoder = Encoder(dims)
        self.decoder = Decoder(dims)
        self.translator = Translator(dims)
        self.denoiser = Denoiser(dims)

    def groups(self) -> dict[str, list[nn.Parameter]]:
        return {
            "vae": list(self.encoder.parameters()) + list(self.decoder.parameters()),
            "translator": list(self.translator.parameters()),
            "denoiser": list(self.denoiser.parameters()),
        }

    def encode(self, frames):
        b = frames.shape[0]
        if frames.shape[-2] % 4 or frames.shape[-1] % 4:
            raise ValueError(f"frame size {tuple(frames.shape[-2:])} not divisible by 4")
        mu, logvar = self.encoder(fold(frames))
        return unfold(mu, b), unfold(logvar, b)

    def decode(self, z):
        if z.shape[-2:] != (self.dims.hz, self.dims.wz) or z.shape[2] != self.dims.Cz:
            raise ValueError(f"latent shape {tuple(z.shape)} does not match model dims")
        return unfold(self.decoder(fold(z)), z.shape[0])

    def translate(self, z_in):
        return self.translator(z_in)

    def denoise_eps(self, z_noisy, t, cond=None):
        b = z_noisy.shape[0]
        t = torch.as_tensor(t, device=z_noisy.device)
        if t.ndim == 0:
            t = t.expand(b)
        if bool((t < 1).any()) or bool((t > self.alpha_bars.numel()).any()):
            raise ValueError(f"timestep outside [1, {self.alpha_bars.numel()}]")
        return self.denoiser(z_noisy, t, cond, self.alpha_bars[t.long() - 1])


def reparameterize(mu, logvar, noise):
    if not (mu.shape == logvar.shape == noise.shape):
        raise ValueError("reparameterize: shape mismatch")
    return mu + torch.exp(0.5 * logvar) * noise


def init_params(dims: ModelDims, seed: int = 0, dtype=torch.float32,
                schedule: DiffusionSchedule | None = None) -> STLDM:
    """Build a freshly initialised model; identical seeds give bit-identical weights."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = STLDM(dims, schedule)
    return model.to(dtype)
