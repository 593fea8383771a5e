"""Generator with non-local bottleneck and two decoders; spectrally normalized discriminator."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DimensionError, InputError
from .features import to_tensor

IN_CHANNELS = 7  # x (3) | aux (3) | valid mask (1)


@dataclass(frozen=True)
class GeneratorConfig:
    encoder_blocks: int = 6
    base_channels: int = 16
    nonlocal_count: int = 3
    nonlocal_placement: str = "bottleneck"
    residual_blocks_between_nonlocal: int = 1
    # None derives the count from the non-local layout; ablations pin it so
    # removing non-local layers keeps the residual blocks
    residual_blocks: int | None = None
    multitask: bool = True
    upsample_mode: str = "nearest"
    max_channel_mult: int = 8

    def __post_init__(self):
        if self.encoder_blocks < 1:
            raise InputError("encoder_blocks must be >= 1")
        if self.nonlocal_count < 0:
            raise InputError("nonlocal_count must be >= 0")
        if self.nonlocal_placement not in ("bottleneck", "bottleneck+decoder"):
            raise InputError(f"unknown nonlocal_placement {self.nonlocal_placement!r}")

    @property
    def bottleneck_nonlocal(self) -> int:
        if self.nonlocal_placement == "bottleneck":
            return self.nonlocal_count
        return min(2, self.nonlocal_count)

    @property
    def decoder_nonlocal(self) -> int:
        return self.nonlocal_count - self.bottleneck_nonlocal

    @property
    def n_residual(self) -> int:
        if self.residual_blocks is not None:
            return self.residual_blocks
        return self.residual_blocks_between_nonlocal * max(self.bottleneck_nonlocal - 1, 0)

    def to_dict(self) -> dict:
        return asdict(self)


# non-local attention --------------------------------------------------------

class NonLocalBlock(nn.Module):
    """Embedded-Gaussian non-local block with a residual output projection."""

    def __init__(self, channels: int, embed: int | None = None):
        super().__init__()
        embed = embed or max(channels // 2, 1)
        self.theta = nn.Linear(channels, embed, bias=False)
        self.phi = nn.Linear(channels, embed, bias=False)
        self.g = nn.Linear(channels, embed, bias=False)
        self.out_proj = nn.Linear(embed, channels, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, c, h, w = x.shape
        feats = x.flatten(2).transpose(1, 2)  # (N, P, C)
        out = non_local_forward(feats, self)
        return out.transpose(1, 2).reshape(n, c, h, w)


def attention_weights(feats: torch.Tensor, block: NonLocalBlock) -> torch.Tensor:
    """Row-stochastic (.., P, P) matrix of exp(theta_i . phi_j) normalized over j."""
    logits = block.theta(feats) @ block.phi(feats).transpose(-1, -2)
    logits = logits - logits.amax(dim=-1, keepdim=True)
    e = torch.exp(logits)
    return e / e.sum(dim=-1, keepdim=True)


def non_local_forward(feats: torch.Tensor, block: NonLocalBlock, residual: bool = True) -> torch.Tensor:
    """Attend over all P positions of a (P, C) or (N, P, C) tensor.

    With ``residual=False`` the raw aggregate sum_j a_ij g(x_j) is returned
    (embedding width, no output projection).
    """
    if feats.shape[-2] < 1:
        raise DimensionError("non-local input needs at least one position")
    if not torch.isfinite(feats).all():
        raise FloatingPointError("non-finite input to non-local block")
    y = attention_weights(feats, block) @ block.g(feats)
    if not residual:
        return y
    return feats + block.out_proj(y)


# generator -------------------------------------------------------------------

def conv_bn_relu(cin, cout, kernel=3, stride=1):
    pad = (kernel - 1) // 2 if stride == 1 else 1
    return nn.Sequential(nn.Conv2d(cin, cout, kernel, stride, pad, bias=False),
                         nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class ResidualBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, 1, 1, bias=False), nn.BatchNorm2d(channels), nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, 1, 1, bias=False), nn.BatchNorm2d(channels))

    def forward(self, x):
        return F.relu(x + self.body(x))


class UpBlock(nn.Module):
    """Upsample then convolve (no transposed convolutions)."""

    def __init__(self, cin, cout, mode="nearest"):
        super().__init__()
        self.mode = mode
        self.conv = conv_bn_relu(cin, cout)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode=self.mode))


class Generator(nn.Module):
    """Shared encoder, non-local bottleneck, U-net image decoder and segmentation decoder."""

    def __init__(self, cfg: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.cfg = cfg
        L, b = cfg.encoder_blocks, cfg.base_channels
        ch = [b * min(2 ** i, cfg.max_channel_mult) for i in range(L)]
        self.channels = ch

        self.encoder = nn.ModuleList()
        cin = IN_CHANNELS
        for c in ch:
            self.encoder.append(conv_bn_relu(cin, c, kernel=4, stride=2))
            cin = c

        bott = []
        for i in range(cfg.bottleneck_nonlocal):
            bott.append(NonLocalBlock(ch[-1]))
        # interleave residual blocks between non-local layers, any surplus goes last
        layers, n_res = [], cfg.n_residual
        gaps = max(len(bott) - 1, 0)
        per_gap = [n_res // gaps + (1 if k < n_res % gaps else 0) for k in range(gaps)] if gaps else []
        for i, nl in enumerate(bott):
            layers.append(nl)
            if i < gaps:
                layers.extend(ResidualBlock(ch[-1]) for _ in range(per_gap[i]))
        if not gaps:
            layers.extend(ResidualBlock(ch[-1]) for _ in range(n_res))
        self.bottleneck = nn.Sequential(*layers)

        # image decoder: stage l consumes cat(h, e_l) and emits the channels of level l-1
        self.img_up = nn.ModuleList()
        self.img_nl = nn.ModuleList()
        h_ch = ch[-1]
        for lvl in range(L - 1, -1, -1):
            cout = ch[lvl - 1] if lvl > 0 else b
            self.img_up.append(UpBlock(h_ch + ch[lvl], cout, cfg.upsample_mode))
            k = L - 1 - lvl
            self.img_nl.append(NonLocalBlock(cout) if k < cfg.decoder_nonlocal else nn.Identity())
            h_ch = cout
        self.img_out = nn.Conv2d(h_ch + IN_CHANNELS, 3, 3, 1, 1)

        if cfg.multitask:
            seg = []
            h_ch = ch[-1]
            for lvl in range(L - 1, -1, -1):
                cout = ch[lvl - 1] if lvl > 0 else b
                seg.append(UpBlock(h_ch, cout, cfg.upsample_mode))
                h_ch = cout
            self.seg_up = nn.Sequential(*seg)
            self.seg_out = nn.Conv2d(h_ch, 1, 3, 1, 1)

    def forward(self, x: torch.Tensor, aux: torch.Tensor, mask: torch.Tensor):
        """NCHW inputs; returns (y_hat (N,3,H,W), seg_hat (N,1,H,W) or None)."""
        n, _, h, w = x.shape
        div = 2 ** self.cfg.encoder_blocks
        if h % div or w % div:
            raise DimensionError(f"spatial size {(h, w)} not divisible by 2^{self.cfg.encoder_blocks}")
        inp = torch.cat([x, aux, mask], dim=1)
        skips, hcur = [], inp
        for block in self.encoder:
            hcur = block(hcur)
            skips.append(hcur)
        z = self.bottleneck(hcur)
        hcur = z
        for up, nl, skip in zip(self.img_up, self.img_nl, reversed(skips)):
            hcur = nl(up(torch.cat([hcur, skip], dim=1)))
        y_hat = torch.sigmoid(self.img_out(torch.cat([hcur, inp], dim=1)))
        seg_hat = None
        if self.cfg.multitask:
            seg_hat = torch.sigmoid(self.seg_out(self.seg_up(z)))
        return y_hat, seg_hat


def generator_forward(x: np.ndarray, aux, gen: Generator) -> tuple[np.ndarray, np.ndarray | None]:
    """Single-image inference on (H, W, 3) arrays; returns (y_hat, seg_hat) arrays."""
    if x.shape != aux.aux.shape or x.shape[:2] != aux.valid_mask.shape:
        raise DimensionError("x, aux and valid mask must share (H, W)")
    was_training = gen.training
    gen.eval()
    try:
        with torch.no_grad():
            mask = torch.from_numpy(np.asarray(aux.valid_mask, dtype=np.float32))[None, None]
            y_hat, seg_hat = gen(to_tensor(x), to_tensor(aux.aux), mask)
    finally:
        gen.train(was_training)
    y = y_hat[0].permute(1, 2, 0).numpy()
    s = seg_hat[0].permute(1, 2, 0).numpy() if seg_hat is not None else None
    return y, s


# spectral normalization & discriminator --------------------------------------

def _l2n(v: torch.Tensor, eps: float) -> torch.Tensor:
    return v / v.norm().clamp_min(eps)


def spectral_normalize(weight: torch.Tensor, u: torch.Tensor, iters: int = 1, eps: float = 1e-12):
    """Divide ``weight`` by its power-iteration estimate of the top singular value.

    ``weight`` is viewed as (out, -1). Returns (normalized weight, updated u);
    gradients flow through the weight but not through u, v. A zero matrix
    gives sigma clamped to ``eps`` and comes back unchanged.
    """
    w = weight.reshape(weight.shape[0], -1)
    with torch.no_grad():
        u_new = u.clone()
        v = _l2n(w.t() @ u_new, eps)
        for _ in range(iters):
            v = _l2n(w.t() @ u_new, eps)
            wv = w @ v
            if wv.norm() > eps:
                u_new = _l2n(wv, eps)
    sigma = (u_new @ (w @ v)).clamp_min(eps)
    return weight / sigma, u_new


class SNConv2d(nn.Conv2d):
    """Conv2d whose weight is spectrally normalized on every forward pass."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        gen = torch.Generator().manual_seed(0)
        self.register_buffer("u", _l2n(torch.randn(self.out_channels, generator=gen), 1e-12))
        self.power_iterations = 1
        self.update_state = True

    def forward(self, x):
        w, u = spectral_normalize(self.weight, self.u, self.power_iterations)
        if self.update_state and self.training:
            self.u.copy_(u)
        return F.conv2d(x, w, self.bias, self.stride, self.padding)


class Discriminator(nn.Module):
    """Patch discriminator on cat(x, y) with sigmoid outputs in (0, 1)."""

    def __init__(self, base_channels: int = 16, train_iters: int = 1, eval_iters: int = 20):
        super().__init__()
        b = base_channels
        self.train_iters, self.eval_iters = train_iters, eval_iters
        self.convs = nn.ModuleList([
            SNConv2d(6, b, 4, 2, 1), SNConv2d(b, 2 * b, 4, 2, 1),
            SNConv2d(2 * b, 4 * b, 4, 2, 1), SNConv2d(4 * b, 1, 3, 1, 1)])

    def sn_layers(self):
        return list(self.convs)

    def forward(self, x: torch.Tensor, y: torch.Tensor, update_state: bool = True) -> torch.Tensor:
        if x.shape != y.shape:
            raise DimensionError(f"discriminator inputs differ in shape: {tuple(x.shape)} vs {tuple(y.shape)}")
        iters = self.train_iters if self.training else self.eval_iters
        h = torch.cat([x, y], dim=1)
        for i, conv in enumerate(self.convs):
            conv.power_iterations = iters
            conv.update_state = update_state
            h = conv(h)
            if i < len(self.convs) - 1:
                h = F.leaky_relu(h, 0.2)
        # keep probabilities strictly inside (0, 1) in float32
        return torch.sigmoid(h).clamp(1e-7, 1 - 1e-7)


def discriminator_forward(x, y, disc: Discriminator) -> torch.Tensor:
    """Probability map for NCHW tensors or (H, W, 3) arrays."""
    if isinstance(x, np.ndarray):
        x, y = to_tensor(x), to_tensor(np.asarray(y))
    return disc(x, y)


def init_weights(module: nn.Module, seed: int) -> None:
    """Seeded normal(0, 0.02) conv/linear init; BN weights start at 1."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * 0.02)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()
        for m in module.modules():
            if isinstance(m, NonLocalBlock):
                for lin in (m.theta, m.phi, m.g, m.out_proj):
                    bound = 1.0 / math.sqrt(lin.weight.shape[1])
                    lin.weight.copy_((torch.rand(lin.weight.shape, generator=gen) * 2 - 1) * bound)
