"""Convolutional autoencoder and latent-space slice synthesis.

The encoder maps a (1, H, W) slice to a 16-channel code at 1/16 of the
spatial size; the decoder mirrors it. Intermediate slices are decoded from
convex combinations of the codes of two adjacent acquired slices.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .autodiff import ModelWeights, ShapeError, Tensor, clamp, no_grad
from .autodiff.nn import AvgPool2d, BatchNorm2d, Conv2d, LeakyReLU, Sequential, Upsample2d
from .autodiff.serialize import IncompatibleWeightsError
from .volume_io import Slice, Volume, VolumeShapeError


class LatentDomainError(ValueError):
    """Mixing coefficient outside [0, 1] or a non-increasing alpha grid."""


@dataclass(frozen=True)
class AeConfig:
    base_channels: int = 32
    blocks: int = 4
    latent_channels: int = 16
    leaky_slope: float = 0.01
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    @property
    def factor(self) -> int:
        return 2 ** self.blocks

    @property
    def top_channels(self) -> int:
        return self.base_channels * 2 ** (self.blocks - 1)

    def check_input(self, rows: int, cols: int) -> None:
        f = self.factor
        if rows % f or cols % f:
            raise ShapeError(f"slice {rows}x{cols} is not divisible by {f}")


@dataclass
class LatentCode:
    """Encoder output for one slice (or a mixture of two)."""

    features: np.ndarray  # (latent_channels, H/16, W/16), float32
    source: tuple[int, ...] = ()
    alpha: float | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.features.shape


def _conv(cfg: AeConfig, rng, cin: int, cout: int) -> Conv2d:
    return Conv2d(cin, cout, rng, kernel=3, padding=1, negative_slope=cfg.leaky_slope)


def build_encoder(cfg: AeConfig, rng: np.random.Generator) -> Sequential:
    layers = []
    cin = 1
    for b in range(cfg.blocks):
        ch = cfg.base_channels * 2 ** b
        layers += [_conv(cfg, rng, cin, ch), LeakyReLU(cfg.leaky_slope),
                   _conv(cfg, rng, ch, ch), LeakyReLU(cfg.leaky_slope),
                   BatchNorm2d(ch, cfg.bn_momentum, cfg.bn_eps), AvgPool2d()]
        cin = ch
    layers += [_conv(cfg, rng, cin, cfg.top_channels), LeakyReLU(cfg.leaky_slope),
               _conv(cfg, rng, cfg.top_channels, cfg.latent_channels)]
    return Sequential(layers)


def build_decoder(cfg: AeConfig, rng: np.random.Generator) -> Sequential:
    top = cfg.top_channels
    layers = [_conv(cfg, rng, cfg.latent_channels, top), LeakyReLU(cfg.leaky_slope),
              _conv(cfg, rng, top, top), LeakyReLU(cfg.leaky_slope)]
    cin = top
    for b in range(cfg.blocks):
        ch = top // 2 ** b
        layers += [_conv(cfg, rng, cin, ch), LeakyReLU(cfg.leaky_slope),
                   _conv(cfg, rng, ch, ch), LeakyReLU(cfg.leaky_slope),
                   BatchNorm2d(ch, cfg.bn_momentum, cfg.bn_eps), Upsample2d()]
        cin = ch
    layers += [_conv(cfg, rng, cin, cfg.latent_channels), LeakyReLU(cfg.leaky_slope),
               _conv(cfg, rng, cfg.latent_channels, 1)]
    return Sequential(layers)


class Autoencoder:
    """Encoder/decoder pair with a shared parameter namespace.

    Parameters are named ``encoder.<i>.<name>`` / ``decoder.<i>.<name>``.
    """

    def __init__(self, cfg: AeConfig | None = None, seed: int = 0):
        self.cfg = cfg or AeConfig()
        rng = np.random.Generator(np.random.Philox(seed))
        self.encoder = build_encoder(self.cfg, rng)
        self.decoder = build_decoder(self.cfg, rng)
        self.training = True

    # -- mode / parameters -------------------------------------------------

    def train(self) -> "Autoencoder":
        self.training = True
        self.encoder.set_training(True)
        self.decoder.set_training(True)
        return self

    def eval(self) -> "Autoencoder":
        self.training = False
        self.encoder.set_training(False)
        self.decoder.set_training(False)
        return self

    def parameters(self) -> dict[str, Tensor]:
        out = {f"encoder.{k}": v for k, v in self.encoder.parameters().items()}
        out.update({f"decoder.{k}": v for k, v in self.decoder.parameters().items()})
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {f"encoder.{k}": v for k, v in self.encoder.buffers().items()}
        out.update({f"decoder.{k}": v for k, v in self.decoder.buffers().items()})
        return out

    def astype(self, dtype) -> "Autoencoder":
        """Cast every parameter in place (float64 is used for gradient checks)."""
        for p in self.parameters().values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    @property
    def fingerprint(self) -> str:
        layout = self.encoder.describe() + "|" + self.decoder.describe()
        return "aniso-sr-ae/1 " + json.dumps(asdict(self.cfg), sort_keys=True) + " " + layout

    def state(self) -> ModelWeights:
        params = {k: v.data.astype(np.float32, copy=True) for k, v in self.parameters().items()}
        buffers = {k: np.array(v, dtype=np.float32) for k, v in self.buffers().items()}
        return ModelWeights(self.fingerprint, params, buffers)

    def load_state(self, weights: ModelWeights) -> None:
        """Copy ``weights`` into the model, all or nothing."""
        if weights.fingerprint != self.fingerprint:
            raise IncompatibleWeightsError(
                f"weights built for {weights.fingerprint!r}, model is {self.fingerprint!r}")
        params = self.parameters()
        if set(params) != set(weights.params) or set(self.buffers()) != set(weights.buffers):
            raise IncompatibleWeightsError("weight names do not match the model")
        for name, p in params.items():
            if p.shape != weights.params[name].shape:
                raise IncompatibleWeightsError(f"shape mismatch for {name}")
        for name, p in params.items():
            p.data = np.array(weights.params[name], dtype=p.dtype)
        for part, prefix in ((self.encoder, "encoder."), (self.decoder, "decoder.")):
            part.load_buffers({k[len(prefix):]: v for k, v in weights.buffers.items()
                               if k.startswith(prefix)})

    # -- forward -----------------------------------------------------------

    def forward(self, x: Tensor) -> Tensor:
        """Unclamped reconstruction."""
        self.cfg.check_input(x.shape[2], x.shape[3])
        return self.decoder(self.encoder(x))

    def reconstruct(self, x: Tensor) -> Tensor:
        """Reconstruction clamped to [0, 1], as :func:`decode` returns it.

        The training loss is taken on this output so that background pushed
        below zero lands exactly on zero at inference.
        """
        return clamp(self.forward(x), 0.0, 1.0)

    def encode_batch(self, x: Tensor) -> Tensor:
        if x.shape[1] != 1:
            raise ShapeError(f"encoder expects one input channel, got {x.shape[1]}")
        self.cfg.check_input(x.shape[2], x.shape[3])
        return self.encoder(x)

    def decode_batch(self, z: Tensor) -> Tensor:
        if z.shape[1] != self.cfg.latent_channels:
            raise ShapeError(
                f"decoder expects {self.cfg.latent_channels} latent channels, got {z.shape[1]}")
        return self.decoder(z)


# ---------------------------------------------------------------------------
# inference API (eval mode, no graph)


def _slice_tensor(s: Slice) -> Tensor:
    return Tensor(np.asarray(s.data, dtype=np.float32)[None, None])


def encode(model: Autoencoder, s: Slice, index: int | None = None) -> LatentCode:
    if model.training:
        raise RuntimeError("encode() needs the model in eval mode")
    rows, cols = s.data.shape
    try:
        model.cfg.check_input(rows, cols)
    except ShapeError as exc:
        raise VolumeShapeError(str(exc)) from exc
    with no_grad():
        z = model.encode_batch(_slice_tensor(s))
    return LatentCode(z.data[0].copy(), () if index is None else (index,))


def decode(model: Autoencoder, z: LatentCode, spacing: tuple[float, float] = (1.0, 1.0)) -> Slice:
    """Decode a latent code to a slice clamped to [0, 1]."""
    if model.training:
        raise RuntimeError("decode() needs the model in eval mode")
    with no_grad():
        out = model.decode_batch(Tensor(z.features[None].astype(np.float32)))
    return Slice(np.clip(out.data[0, 0], 0.0, 1.0), spacing)


def latent_mix(z_a: LatentCode, z_b: LatentCode, alpha: float) -> LatentCode:
    """Convex combination ``(1 - alpha) * z_a + alpha * z_b``.

    Evaluated in float64 so alpha=0 and alpha=1 return the endpoints exactly.
    """
    if not 0.0 <= alpha <= 1.0:
        raise LatentDomainError(f"alpha must lie in [0, 1], got {alpha}")
    if z_a.shape != z_b.shape:
        raise ShapeError(f"latent shapes differ: {z_a.shape} vs {z_b.shape}")
    a = z_a.features.astype(np.float64)
    b = z_b.features.astype(np.float64)
    mixed = ((1.0 - alpha) * a + alpha * b).astype(np.float32)
    return LatentCode(mixed, tuple(z_a.source) + tuple(z_b.source), float(alpha))


def _check_alphas(alphas: Sequence[float]) -> list[float]:
    alphas = [float(a) for a in alphas]
    for a in alphas:
        if not 0.0 <= a <= 1.0:
            raise LatentDomainError(f"alpha must lie in [0, 1], got {a}")
    if any(b <= a for a, b in zip(alphas, alphas[1:])):
        raise LatentDomainError(f"alphas must be strictly increasing, got {alphas}")
    return alphas


def synthesize_between(model: Autoencoder, s_a: Slice, s_b: Slice,
                       alphas: Sequence[float]) -> list[Slice]:
    """Decode mixtures of the codes of ``s_a`` and ``s_b`` (each encoded once)."""
    alphas = _check_alphas(alphas)
    if s_a.data.shape != s_b.data.shape:
        raise VolumeShapeError(f"slice shapes differ: {s_a.data.shape} vs {s_b.data.shape}")
    z_a, z_b = encode(model, s_a), encode(model, s_b)
    return [decode(model, latent_mix(z_a, z_b, a), s_a.spacing) for a in alphas]


def superresolve_volume(model: Autoencoder, v: Volume, factor: int = 2) -> Volume:
    """Insert ``factor - 1`` synthesized slices between every acquired pair.

    Acquired slices are copied verbatim to indices ``k * factor``; the
    through-plane spacing is divided by ``factor``.
    """
    n = v.data.shape[0]
    if n < 2:
        raise VolumeShapeError(f"super-resolution needs at least 2 slices, got {n}")
    if factor < 2:
        raise ValueError(f"factor must be >= 2, got {factor}")
    rows, cols = v.data.shape[1:]
    alphas = [k / factor for k in range(1, factor)]
    slices = [Slice(v.data[k], v.spacing[1:]) for k in range(n)]
    codes = [encode(model, s, k) for k, s in enumerate(slices)]
    out = np.empty(((n - 1) * factor + 1, rows, cols), dtype=np.float32)
    for k in range(n - 1):
        out[k * factor] = v.data[k]
        for j, a in enumerate(alphas, start=1):
            out[k * factor + j] = decode(model, latent_mix(codes[k], codes[k + 1], a)).data
    out[-1] = v.data[-1]
    spacing = (v.spacing[0] / factor, v.spacing[1], v.spacing[2])
    return Volume(out, spacing, f"{v.provenance}|ae-superres x{factor}")
