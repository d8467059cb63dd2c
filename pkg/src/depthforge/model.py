"""Identity encoder, style-modulated viewpoint generator and the smoothed KL loss.

Widths scale with ``ModelConfig``. At the canonical config (64 px, 8 bits,
base 256, latent 512, 55 classes) the layers are::

    encoder:   1x1 conv bins->256, 4 residual blocks (256->512, then 512->512)
               each halving resolution, 3x3 conv 513->512 on the appended
               minibatch-stddev channel, Linear(8192, 512), Linear(512, 512)
    generator: PixelNorm + 8 x Linear(512, 512) style MLP,
               class/view embeddings (4096 each) -> 512x4x4,
               conv1 + to_rgb1, 4 upsampling levels of two modulated 3x3 convs
               with a 1x1 to_rgb each, skip outputs summed after upsampling
"""

from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import numcore as nc
from .depthcodec import DepthMap, one_hot

Params = dict[str, nc.Tensor]


@dataclass(frozen=True)
class ModelConfig:
    resolution: int = 64
    bits: int = 8
    latent_dim: int = 512
    base_channels: int = 256
    n_classes: int = 55
    n_views: int = 20
    eps_smooth: float = 0.2
    style_layers: int = 8
    equalized_lr: bool = False
    style_lr_mul: float = 1.0

    def __post_init__(self):
        levels = math.log2(self.resolution / 4) if self.resolution >= 8 else 0
        if self.resolution < 8 or levels != int(levels):
            raise ValueError(f"resolution must be 4*2^k with k >= 1, got {self.resolution}")
        if self.latent_dim < 8:
            raise ValueError("latent_dim must be >= 8")
        if not 0.0 < self.eps_smooth < 1.0:
            raise ValueError("eps_smooth must lie in (0, 1)")
        if not 1 <= self.bits <= 8:
            raise ValueError("bits must lie in [1, 8]")
        if self.n_classes < 1 or self.n_views < 1:
            raise ValueError("n_classes and n_views must be positive")
        if not self.style_lr_mul > 0:
            raise ValueError("style_lr_mul must be positive")

    @property
    def levels(self) -> int:
        return int(math.log2(self.resolution // 4))

    @property
    def bins(self) -> int:
        return 2**self.bits

    @property
    def wide(self) -> int:
        return 2 * self.base_channels

    @property
    def embed_dim(self) -> int:
        return self.base_channels * 16

    def to_dict(self) -> dict:
        return asdict(self)


def _normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) / math.sqrt(fan_in)


def generator_channels(cfg: ModelConfig) -> list[tuple[int, int]]:
    """(in, out) channels of each upsampling level; the last level narrows to base."""
    chans = []
    for i in range(cfg.levels):
        cout = cfg.base_channels if i == cfg.levels - 1 else cfg.wide
        chans.append((cfg.wide, cout))
    return chans


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name and shape, in registration order."""
    b, wide, L, bins = cfg.base_channels, cfg.wide, cfg.latent_dim, cfg.bins
    s: dict[str, tuple[int, ...]] = {}

    s["enc.conv0.w"] = (b, bins, 1, 1)
    s["enc.conv0.b"] = (b,)
    cin = b
    for i in range(cfg.levels):
        s[f"enc.block{i}.conv1.w"] = (cin, cin, 3, 3)
        s[f"enc.block{i}.conv1.b"] = (cin,)
        s[f"enc.block{i}.conv2.w"] = (wide, cin, 3, 3)
        s[f"enc.block{i}.conv2.b"] = (wide,)
        s[f"enc.block{i}.skip.w"] = (wide, cin, 1, 1)
        s[f"enc.block{i}.skip.b"] = (wide,)
        cin = wide
    s["enc.final.w"] = (wide, wide + 1, 3, 3)
    s["enc.final.b"] = (wide,)
    s["enc.fc1.w"] = (wide, wide * 16)
    s["enc.fc1.b"] = (wide,)
    s["enc.fc2.w"] = (L, wide)
    s["enc.fc2.b"] = (L,)

    for i in range(cfg.style_layers):
        s[f"gen.style{i}.w"] = (L, L)
        s[f"gen.style{i}.b"] = (L,)
    s["gen.view_emb"] = (cfg.n_views, cfg.embed_dim)
    s["gen.class_emb"] = (cfg.n_classes, cfg.embed_dim)

    def modconv(name, cin, cout, k):
        s[f"{name}.w"] = (cout, cin, k, k)
        s[f"{name}.b"] = (cout,)
        s[f"{name}.aff.w"] = (cin, L)
        s[f"{name}.aff.b"] = (cin,)

    modconv("gen.conv1", wide, wide, 3)
    modconv("gen.rgb0", wide, bins, 1)
    for i, (ci, co) in enumerate(generator_channels(cfg)):
        modconv(f"gen.up{i}.conv_a", ci, co, 3)
        modconv(f"gen.up{i}.conv_b", co, co, 3)
        modconv(f"gen.rgb{i + 1}", co, bins, 1)
    return s


def runtime_gains(cfg: ModelConfig) -> dict[str, float]:
    """Multiplier applied to each stored parameter in the forward pass.

    With ``equalized_lr`` weights are stored as N(0, 1) and scaled by
    1/sqrt(fan_in) on use, so the effective weights have the usual
    N(0, 1/fan_in) distribution while Adam steps are relative to unit scale.
    Style MLP weights and biases are further scaled by ``style_lr_mul``.
    """
    return dict(_gains(cfg))


@functools.lru_cache(maxsize=16)
def _gains(cfg: ModelConfig) -> dict[str, float]:
    out = {}
    for name, shape in param_shapes(cfg).items():
        g = 1.0
        if cfg.equalized_lr and name.endswith(".w"):
            g = 1.0 / math.sqrt(int(np.prod(shape[1:])))
        if name.startswith("gen.style"):
            g *= cfg.style_lr_mul
        out[name] = g
    return out


def init_params(cfg: ModelConfig, seed: int = 0) -> Params:
    """Effective weights ~ N(0, 1/fan_in), biases 0, embeddings ~ N(0, 1), style-affine biases 1."""
    rng = np.random.default_rng(seed)
    gains = _gains(cfg)
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("_emb"):
            data = rng.standard_normal(shape)
        elif name.endswith(".aff.b"):
            data = np.ones(shape)
        elif name.endswith(".b"):
            data = np.zeros(shape)
        else:
            data = _normal(rng, shape, int(np.prod(shape[1:]))) / gains[name]
        params[name] = nc.Tensor(data, requires_grad=True, name=name)
    return params


def _p(params: Params, cfg: ModelConfig, name: str) -> nc.Tensor:
    g = _gains(cfg)[name]
    return params[name] if g == 1.0 else nc.scale(params[name], g)


def parameter_count(params: Params) -> int:
    return int(sum(p.size for p in params.values()))


# encoder


def encode_onehot(x: nc.Tensor, params: Params, cfg: ModelConfig, group_size: int | None = None) -> nc.Tensor:
    """(N, bins, H, W) one-hot maps -> (N, L) identity codes.

    Consecutive runs of ``group_size`` maps share a minibatch-stddev group
    (default: the whole batch).
    """
    if x.shape[1:] != (cfg.bins, cfg.resolution, cfg.resolution):
        raise nc.ShapeError(
            f"encoder expects (N, {cfg.bins}, {cfg.resolution}, {cfg.resolution}), got {x.shape}"
        )
    lrelu = nc.leaky_relu

    def p(name):
        return _p(params, cfg, name)

    h = lrelu(nc.conv2d(x, p("enc.conv0.w"), p("enc.conv0.b")))
    for i in range(cfg.levels):
        pre = f"enc.block{i}"
        skip = nc.conv2d(h, p(f"{pre}.skip.w"), p(f"{pre}.skip.b"), stride=2)
        y = lrelu(nc.conv2d(h, p(f"{pre}.conv1.w"), p(f"{pre}.conv1.b"), pad=1))
        y = lrelu(nc.conv2d(y, p(f"{pre}.conv2.w"), p(f"{pre}.conv2.b"), stride=2, pad=1))
        h = y + skip
    n = x.shape[0]
    h = nc.minibatch_stddev(h, group_size or n)
    h = lrelu(nc.conv2d(h, p("enc.final.w"), p("enc.final.b"), pad=1))
    h = nc.reshape(h, (n, -1))
    h = lrelu(nc.linear(h, p("enc.fc1.w"), p("enc.fc1.b")))
    return nc.linear(h, p("enc.fc2.w"), p("enc.fc2.b"))


def encode(dm: DepthMap | list[DepthMap], params: Params, cfg: ModelConfig) -> np.ndarray:
    """Identity code(s) of one map (L,) or of a list of maps (N, L), as one stddev group."""
    single = isinstance(dm, DepthMap)
    maps = [dm] if single else list(dm)
    for m in maps:
        if m.bits != cfg.bits or m.resolution != cfg.resolution:
            raise ValueError(
                f"depth map ({m.resolution}px, {m.bits} bits) does not match model "
                f"({cfg.resolution}px, {cfg.bits} bits)"
            )
    x = nc.Tensor(np.stack([one_hot(m) for m in maps]))
    z = encode_onehot(x, params, cfg).data
    return z[0] if single else z


def average_identity(codes) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.float64)
    if codes.ndim != 2 or codes.shape[0] == 0:
        raise ValueError("average_identity needs a non-empty list of equal-length codes")
    return codes.mean(axis=0)


def average_groups(z: nc.Tensor, group_size: int) -> nc.Tensor:
    """Mean over consecutive groups of codes: (G*k, L) -> (G, L)."""
    n, L = z.shape
    return nc.mean(nc.reshape(z, (n // group_size, group_size, L)), axis=1)


# generator


def style_vector(z: nc.Tensor, params: Params, cfg: ModelConfig) -> nc.Tensor:
    w = nc.pixel_norm(z, axis=1)
    for i in range(cfg.style_layers):
        w = nc.linear(w, _p(params, cfg, f"gen.style{i}.w"), _p(params, cfg, f"gen.style{i}.b"))
        if i < cfg.style_layers - 1:
            w = nc.leaky_relu(w)
    return w


def _modconv(x, w, params, cfg, name, demodulate=True):
    style = nc.linear(w, _p(params, cfg, f"{name}.aff.w"), params[f"{name}.aff.b"])
    return nc.modulated_conv2d(x, _p(params, cfg, f"{name}.w"), style, demodulate=demodulate,
                               bias=params[f"{name}.b"])


def generate_batch(z: nc.Tensor, class_ids, view_ids, params: Params, cfg: ModelConfig) -> nc.Tensor:
    """(N, L) codes + per-row class/view ids -> (N, bins, H, W) logits."""
    class_ids = np.asarray(class_ids, dtype=np.int64).reshape(-1)
    view_ids = np.asarray(view_ids, dtype=np.int64).reshape(-1)
    n = z.shape[0]
    if class_ids.size != n or view_ids.size != n:
        raise nc.ShapeError(f"generate: {n} codes but {class_ids.size} class ids and {view_ids.size} view ids")
    if z.shape[1] != cfg.latent_dim:
        raise nc.ShapeError(f"generate: codes have width {z.shape[1]}, model latent_dim is {cfg.latent_dim}")
    p = params
    w = style_vector(z, p, cfg)
    cls = nc.embedding(p["gen.class_emb"], class_ids)
    view = nc.embedding(p["gen.view_emb"], view_ids)
    x = nc.reshape(nc.concat([cls, view], axis=1), (n, cfg.wide, 4, 4))

    x = nc.leaky_relu(_modconv(x, w, p, cfg, "gen.conv1"))
    skip = _modconv(x, w, p, cfg, "gen.rgb0", demodulate=False)
    for i in range(cfg.levels):
        x = nc.upsample2x(x)
        x = nc.leaky_relu(_modconv(x, w, p, cfg, f"gen.up{i}.conv_a"))
        x = nc.leaky_relu(_modconv(x, w, p, cfg, f"gen.up{i}.conv_b"))
        skip = nc.upsample2x(skip) + _modconv(x, w, p, cfg, f"gen.rgb{i + 1}", demodulate=False)
    return skip


def generate(z, class_id: int, view_id: int, params: Params, cfg: ModelConfig) -> np.ndarray:
    """Logits (bins, H, W) for one identity code seen from ``view_id``."""
    if not 0 <= class_id < cfg.n_classes:
        raise IndexError(f"class_id {class_id} out of range [0, {cfg.n_classes})")
    if not 0 <= view_id < cfg.n_views:
        raise IndexError(f"view_id {view_id} out of range [0, {cfg.n_views})")
    zt = nc.Tensor(np.asarray(z, dtype=np.float64).reshape(1, -1))
    return generate_batch(zt, [class_id], [view_id], params, cfg).data[0]


def predict_codes(logits: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over the bin axis (axis -3); ties go to the lower code."""
    return np.argmax(logits, axis=-3).astype(np.uint8)


def predict_depthmap(logits: np.ndarray, view_id: int, near: float, far: float, projection: str) -> DepthMap:
    bits = int(round(math.log2(logits.shape[-3])))
    if 2**bits != logits.shape[-3]:
        raise ValueError(f"logit channel count {logits.shape[-3]} is not a power of two")
    return DepthMap(predict_codes(logits), bits=bits, near=near, far=far, view_id=view_id, projection=projection)


# loss


def smoothed_target(codes: np.ndarray, bits: int, eps: float) -> np.ndarray:
    """Label-smoothed distributions (…, bins, H, W) from integer code maps (…, H, W)."""
    if not 0.0 <= eps < 1.0:
        raise ValueError("eps must lie in [0, 1)")
    bins = 2**bits
    codes = np.asarray(codes)
    lead, hw = codes.shape[:-2], codes.shape[-2:]
    t = np.full(lead + (bins,) + hw, eps / (bins - 1))
    np.put_along_axis(t, np.expand_dims(codes.astype(np.int64), -3), 1.0 - eps, axis=-3)
    return t


def kl_loss(target: np.ndarray, logits: nc.Tensor) -> nc.Tensor:
    """Mean over pixels of KL(target || softmax(logits)) along the bin axis 1."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != logits.shape:
        raise nc.ShapeError(f"kl_loss: target {target.shape} vs logits {logits.shape}")
    n_pix = target.size // target.shape[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = float(np.sum(np.where(target > 0, target * np.log(target), 0.0)))
    cross = nc.tsum(nc.mul(nc.Tensor(target), nc.log_softmax(logits, axis=1)))
    return nc.scale(nc.add(cross, -ent), -1.0 / n_pix)
