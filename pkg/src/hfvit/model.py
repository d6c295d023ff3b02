"""HFViT network: separable-conv stem, two HAT blocks around a carrier-token
interaction layer, and a QP-conditioned MLP head."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import ContractError, DataError, DimensionError, InfeasibleError

CTU_SIZE = 64
NUM_OUTPUTS = 21
MAX_QP = 51
WINDOW = 2


@dataclass
class HfvitConfig:
    channels: tuple[int, int, int, int] = (8, 16, 24, 32)
    heads: int = 2
    ffn_ratio: int = 2
    d1: int = 1024
    d2: int = 1536
    p1: float = 0.3
    p2: float = 0.1
    fused: bool = False
    per_head_bias: bool = True
    attn_proj_bias: bool = True
    batch_norm: bool = True
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != 4 or min(self.channels) < 1:
            raise ValueError(f"channels must be four positive ints, got {self.channels}")
        if self.width % self.heads:
            raise ValueError(f"n3={self.width} must equal heads * head_dim")
        if self.d1 < 1 or self.d2 < 1:
            raise ValueError("head dims must be positive")
        if not (0 <= self.p2 <= self.p1 < 1):
            raise ValueError(f"dropout must satisfy 0 <= p2 <= p1 < 1, got p1={self.p1}, p2={self.p2}")

    @property
    def width(self) -> int:
        return self.channels[-1]

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def has_bn(self) -> bool:
        return self.batch_norm and not self.fused

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HfvitConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "HfvitConfig":
        d = self.to_dict()
        d.update(changes)
        return HfvitConfig.from_dict(d)


MICRO_CONFIG = HfvitConfig(channels=(1, 2, 3, 4), d1=8, d2=4, p1=0.0, p2=0.0)
# full-width backbone with a tiny head: cheap to finite-difference, and its
# 32-wide layer norms stay well conditioned (4-wide ones do not)
GRADCHECK_CONFIG = HfvitConfig(d1=8, d2=4, p1=0.0, p2=0.0)


# ----------------------------------------------------------------------------
# building blocks


class SeparableConvBN(nn.Module):
    """Depthwise 3x3 -> pointwise 1x1 -> BN -> GELU.

    After fusion (or with BN disabled) the pointwise conv carries a bias and
    ``bn`` is ``None``.
    """

    def __init__(self, dw: nn.Conv2dLayer, pw: nn.Conv2dLayer, bn: nn.BatchNormLayer | None):
        self.dw = dw
        self.pw = pw
        self.bn = bn

    def __call__(self, x: Tensor) -> Tensor:
        y = self.pw(self.dw(x))
        if self.bn is not None:
            y = self.bn(y)
        return ad.gelu(y)


class HatBlock(nn.Module):
    def __init__(self, ln1, attn, ln2, ffn1, ffn2):
        self.ln1, self.attn, self.ln2, self.ffn1, self.ffn2 = ln1, attn, ln2, ffn1, ffn2

    def __call__(self, z: Tensor) -> Tensor:
        z = z + self.attn(self.ln1(z), use_bias_B=True)
        return z + self.ffn2(ad.gelu(self.ffn1(self.ln2(z))))


class CarrierInteraction(nn.Module):
    def __init__(self, ln, attn):
        self.ln, self.attn = ln, attn

    def __call__(self, c: Tensor) -> Tensor:
        return c + self.attn(self.ln(c), use_bias_B=False)


class HeadLayer(nn.Module):
    """Linear -> [BN] -> ReLU -> Dropout."""

    def __init__(self, fc: nn.Linear, bn: nn.BatchNormLayer | None, p: float):
        self.fc, self.bn, self.p = fc, bn, p

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        y = self.fc(x)
        if self.bn is not None:
            y = self.bn(y)
        return nn.dropout(ad.relu(y), self.p, self.training, rng)


# ----------------------------------------------------------------------------
# initialization


class _Init:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)

    def he(self, shape, fan_in):
        return self.rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)

    def xavier(self, fan_out, fan_in):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return self.rng.uniform(-bound, bound, size=(fan_out, fan_in))

    def small(self, shape):
        return self.rng.normal(0.0, 0.02, size=shape)

    def linear(self, fan_in, fan_out, bias=True) -> nn.Linear:
        return nn.Linear(self.xavier(fan_out, fan_in), np.zeros(fan_out) if bias else None)

    def sep_conv(self, cin, cout, stride, bn: bool) -> SeparableConvBN:
        dw = nn.Conv2dLayer("depthwise", self.he((cin, 3, 3), 9), stride)
        pw = nn.Conv2dLayer("pointwise", self.he((cout, cin, 1, 1), cin),
                            bias=None if bn else np.zeros(cout))
        return SeparableConvBN(dw, pw, nn.BatchNormLayer(cout) if bn else None)

    def attention(self, width, heads, bias_tables: int | None, tokens: int, proj_bias: bool):
        projections = [self.linear(width, width, proj_bias) for _ in range(4)]
        rel = None if bias_tables is None else self.small((bias_tables, tokens, tokens))
        return nn.AttentionLayer(*projections, heads=heads, rel_bias=rel)


# ----------------------------------------------------------------------------
# model


class HfvitModel(nn.Module):
    def __init__(self, config: HfvitConfig | None = None):
        self.config = config = config or HfvitConfig()
        init = _Init(config.seed)
        n0, n1, n2, n3 = config.channels
        e = config.width
        bn = config.has_bn
        tokens = WINDOW * WINDOW + 1

        self.entry = init.sep_conv(1, n0, 2, bn)
        self.residual = []
        self.down = []
        for cin, cout in ((n0, n1), (n1, n2), (n2, n3)):
            self.residual.append(init.sep_conv(cin, cin, 1, bn))
            self.down.append(init.sep_conv(cin, cout, 2, bn))

        self.pos_embed = Tensor(init.small((WINDOW * WINDOW, e)), requires_grad=True)
        tables = config.heads if config.per_head_bias else 1
        self.hat1 = self._hat(init, tables, tokens)
        self.ct_interaction = CarrierInteraction(
            nn.LayerNorm(e), init.attention(e, config.heads, None, 4, config.attn_proj_bias))
        self.hat2 = self._hat(init, tables, tokens)

        self.head1 = HeadLayer(init.linear(e + 1, config.d1), nn.BatchNormLayer(config.d1) if bn else None,
                               config.p1)
        self.head2 = HeadLayer(init.linear(config.d1, config.d2), nn.BatchNormLayer(config.d2) if bn else None,
                               config.p2)
        self.head3 = init.linear(config.d2, NUM_OUTPUTS)
        self.eval()

    def _hat(self, init: _Init, tables: int, tokens: int) -> HatBlock:
        cfg = self.config
        e, hidden = cfg.width, cfg.ffn_ratio * cfg.width
        return HatBlock(nn.LayerNorm(e), init.attention(e, cfg.heads, tables, tokens, cfg.attn_proj_bias),
                        nn.LayerNorm(e), init.linear(e, hidden), init.linear(hidden, e))

    # -- tensors

    def state_dict(self) -> dict[str, Tensor]:
        return dict(self.named_tensors())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def astype(self, dtype) -> "HfvitModel":
        """Copy with every tensor cast to ``dtype``."""
        other = copy.deepcopy(self)
        for _, t in other.named_tensors():
            t.data = t.data.astype(dtype)
        return other

    def sep_units(self) -> list[SeparableConvBN]:
        units = [self.entry]
        for r, d in zip(self.residual, self.down):
            units += [r, d]
        return units

    # -- forward

    def __call__(self, x, qp, rng: np.random.Generator | None = None, trace: dict | None = None) -> Tensor:
        """Batched forward: ``x`` is ``N x 64 x 64 x 1`` in [0, 1], ``qp`` has N ints.

        Returns ``N x 21`` split probabilities. ``trace`` (a dict) receives
        intermediate arrays keyed by stage name.
        """
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 4 or x.shape[1:] != (CTU_SIZE, CTU_SIZE, 1):
            raise DimensionError(f"expected N x 64 x 64 x 1 input, got {x.shape}")
        n = x.shape[0]
        qp = np.asarray(qp).reshape(-1)
        if qp.shape[0] != n:
            raise DimensionError(f"{n} CTUs but {qp.shape[0]} QP values")

        def record(key, value):
            if trace is not None:
                trace[key] = np.array(value.data if isinstance(value, Tensor) else value)

        f = self.entry(x)
        record("F0", f)
        for level, (res, down) in enumerate(zip(self.residual, self.down), start=1):
            f = f + res(f)
            record(f"F{level}_residual", f)
            f = down(f)
            record(f"F{level}", f)

        e = self.config.width
        side = f.shape[1] // WINDOW
        # windows and the tokens inside each are raster ordered
        win = f.reshape((n, side, WINDOW, side, WINDOW, e)).transpose((0, 1, 3, 2, 4, 5))
        win = win.reshape((n, side * side, WINDOW, WINDOW, e))
        carriers = nn.adaptive_avg_pool(win)
        spatial = win.reshape((n, side * side, WINDOW * WINDOW, e)) + self.pos_embed
        z = ad.concat([spatial, carriers], axis=2)
        record("Z", z)

        z = self.hat1(z)
        record("Z_hat1", z)
        c = self.ct_interaction(z[:, :, WINDOW * WINDOW, :])
        record("C", c)
        c = c.reshape((n, side * side, 1, e))
        z = ad.concat([z[:, :, :WINDOW * WINDOW, :], c], axis=2)
        z = self.hat2(z)
        record("Z_hat2", z)

        spatial = z[:, :, :WINDOW * WINDOW, :].reshape((n, side, side, WINDOW, WINDOW, e))
        f_out = spatial.transpose((0, 1, 3, 2, 4, 5)).reshape((n, side * WINDOW, side * WINDOW, e))
        record("F_out", f_out)
        f_s = nn.global_avg_pool(f_out)
        record("f_s", f_s)
        q = Tensor((qp / MAX_QP).reshape(n, 1), dtype=f_s.dtype)
        f_tilde = ad.concat([f_s, q], axis=1)
        record("f_tilde", f_tilde)

        h1 = self.head1(f_tilde, rng)
        h2 = self.head2(h1, rng)
        y = ad.sigmoid(self.head3(h2))
        record("yhat", y)
        return y


def forward(model: HfvitModel, ctu, qp: int, trace: dict | None = None) -> Tensor:
    """Single-CTU inference: ``64 x 64 [x 1]`` luminance in [0, 1] -> 21 probabilities."""
    if isinstance(qp, bool) or int(qp) != qp or not 0 <= qp <= MAX_QP:
        raise ValueError(f"qp must be an integer in 0..51, got {qp}")
    arr = ctu.data if isinstance(ctu, Tensor) else np.asarray(ctu)
    if arr.shape == (CTU_SIZE, CTU_SIZE):
        arr = arr[..., None]
    if arr.shape != (CTU_SIZE, CTU_SIZE, 1):
        raise DimensionError(f"CTU must be 64 x 64 x 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError("CTU contains non-finite values")
    if arr.min() < 0 or arr.max() > 1:
        raise DataError("CTU values must lie in [0, 1]")
    x = Tensor(arr[None], dtype=model.pos_embed.dtype)
    return model(x, [int(qp)], trace=trace).reshape((NUM_OUTPUTS,))


# ----------------------------------------------------------------------------
# accounting


@dataclass
class Ledger:
    """Itemized count; ``total`` sums the items."""

    items: dict[str, float] = field(default_factory=dict)

    def add(self, key: str, value: float) -> None:
        self.items[key] = self.items.get(key, 0) + value

    @property
    def total(self):
        return sum(self.items.values())


def _norm_or_bias(cfg: HfvitConfig, channels: int) -> int:
    """Scalars attached after a conv/linear: BN (gamma, beta) or a fused bias."""
    if not cfg.batch_norm:
        return channels
    return channels if cfg.fused else 2 * channels


def param_ledger(config: HfvitConfig) -> Ledger:
    cfg = config
    n0, n1, n2, n3 = cfg.channels
    e = cfg.width
    led = Ledger()

    def sep(key, cin, cout):
        led.add(key, cin * 9 + cout * cin + _norm_or_bias(cfg, cout))

    sep("stem.entry", 1, n0)
    for i, (cin, cout) in enumerate(((n0, n1), (n1, n2), (n2, n3)), start=1):
        sep(f"stem.stage{i}.residual", cin, cin)
        sep(f"stem.stage{i}.down", cin, cout)

    proj = e * e + (e if cfg.attn_proj_bias else 0)
    tables = (cfg.heads if cfg.per_head_bias else 1) * 5 * 5
    hidden = cfg.ffn_ratio * e
    ffn = e * hidden + hidden + hidden * e + e
    led.add("pos_embed", 4 * e)
    for name in ("hat1", "hat2"):
        led.add(f"{name}.layernorms", 2 * 2 * e)
        led.add(f"{name}.attention", 4 * proj + tables)
        led.add(f"{name}.ffn", ffn)
    led.add("ct_interaction", 2 * e + 4 * proj)

    led.add("head.fc1", (e + 1) * cfg.d1 + cfg.d1 + (2 * cfg.d1 if cfg.has_bn else 0))
    led.add("head.fc2", cfg.d1 * cfg.d2 + cfg.d2 + (2 * cfg.d2 if cfg.has_bn else 0))
    led.add("head.fc3", cfg.d2 * NUM_OUTPUTS + NUM_OUTPUTS)
    return led


def count_params(config: HfvitConfig) -> int:
    """Trainable scalar count (BN running statistics excluded)."""
    return int(param_ledger(config).total)


def find_head_dims(target_params: int, config: HfvitConfig | None = None,
                   max_dim: int = 4096) -> tuple[int, int, int]:
    """Search ``d1, d2`` in ``[1, max_dim]`` minimizing ``|count - target|``.

    The count is affine in ``d2`` for fixed ``d1``, so for each ``d1`` only
    the two integers bracketing the exact solution can be optimal. Ties go to
    the smaller ``d1``, then the smaller ``d2``.
    """
    template = config or HfvitConfig()

    def count(d1, d2):
        return count_params(template.replace(d1=d1, d2=d2))

    floor = count(1, 1)
    if target_params < floor:
        raise InfeasibleError(f"target {target_params} is below the fixed cost {floor}")
    best = None
    for d1 in range(1, max_dim + 1):
        base = count(d1, 1)
        slope = count(d1, 2) - base
        guess = 1 + (target_params - base) / slope
        for d2 in {min(max(int(math.floor(guess)), 1), max_dim), min(max(int(math.ceil(guess)), 1), max_dim)}:
            achieved = base + slope * (d2 - 1)
            key = (abs(achieved - target_params), d1, d2)
            if best is None or key < best[0]:
                best = (key, achieved)
    (_, d1, d2), achieved = best
    return d1, d2, achieved


def flop_ledger(config: HfvitConfig) -> Ledger:
    """FLOPs for one 64x64 CTU at inference.

    Convolutions, linear layers and the two attention matrix products count
    2 FLOPs per multiply-accumulate. BN, LN, GELU, ReLU, softmax and sigmoid
    count 1 FLOP per output element. Bias, residual and embedding additions,
    pooling and dropout are not counted. Fused BN disappears entirely.
    """
    cfg = config
    n0, n1, n2, n3 = cfg.channels
    e = cfg.width
    led = Ledger()
    bn = cfg.has_bn

    def sep(key, size, cin, cout, stride):
        out = size // stride
        led.add(key, 2 * out * out * cin * 9 + 2 * out * out * cin * cout)
        led.add(key, out * out * cout * (2 if bn else 1))  # BN + GELU
        return out

    size = sep("stem.entry", CTU_SIZE, 1, n0, 2)
    for i, (cin, cout) in enumerate(((n0, n1), (n1, n2), (n2, n3)), start=1):
        sep(f"stem.stage{i}.residual", size, cin, cin, 1)
        size = sep(f"stem.stage{i}.down", size, cin, cout, 2)

    windows = (size // WINDOW) ** 2
    t = WINDOW * WINDOW + 1
    h, dh, hidden = cfg.heads, cfg.head_dim, cfg.ffn_ratio * e
    for name in ("hat1", "hat2"):
        rows = windows * t
        led.add(f"{name}.layernorms", 2 * rows * e)
        led.add(f"{name}.qkvo", 4 * 2 * rows * e * e)
        led.add(f"{name}.scores", windows * (2 * h * t * t * dh * 2 + h * t * t))
        led.add(f"{name}.ffn", 2 * rows * e * hidden + rows * hidden + 2 * rows * hidden * e)
    led.add("ct_interaction", windows * e + 4 * 2 * windows * e * e
            + 2 * h * windows * windows * dh * 2 + h * windows * windows)

    led.add("head.fc1", 2 * (e + 1) * cfg.d1 + cfg.d1 * (2 if bn else 1))
    led.add("head.fc2", 2 * cfg.d1 * cfg.d2 + cfg.d2 * (2 if bn else 1))
    led.add("head.fc3", 2 * cfg.d2 * NUM_OUTPUTS + NUM_OUTPUTS)
    return led


def count_flops(config: HfvitConfig) -> float:
    """GFLOPs per CTU (see :func:`flop_ledger` for the counting rules)."""
    return flop_ledger(config).total / 1e9
