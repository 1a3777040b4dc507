"""Variant configuration, named presets and block weights.

A single :class:`VariantConfig` covers the whole ablation space: score order,
QK activation, decay mask flavour, conv window, normalization, value
discretization, D residual and Z gate. The named presets pin the algorithms
studied here (plain linear attention, full Mamba-2, Mamba-2S, 2Mamba,
2Mamba-E and softmax attention).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from typing import Optional

import numpy as np

from .errors import ConfigurationError
from .tensorops import ConvSpec, softplus_inverse

ORDERS = ("linear", "squared", "exponential")
QK_ACTIVATIONS = ("none", "relu", "silu")
AMASKS = ("none", "original", "softplus")
NORMS = ("output_rmsnorm", "softmax_norm")

DT_MIN = 0.001
DT_MAX = 0.1
A_INIT_RANGE = (1.0, 16.0)


@dataclass(frozen=True)
class VariantConfig:
    order: str = "linear"
    qk_activation: str = "none"
    amask: str = "none"
    conv_window: int = 1
    conv_activation: str = "none"
    norm: str = "output_rmsnorm"
    discretize_values: bool = False
    d_residual: bool = False
    z_gate: bool = False
    scale_qk: bool = False

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise ConfigurationError("invalid variant config: " + "; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        if self.order not in ORDERS:
            out.append(f"order must be one of {ORDERS}, got {self.order!r}")
        if self.qk_activation not in QK_ACTIVATIONS:
            out.append(f"qk_activation must be one of {QK_ACTIVATIONS}, got {self.qk_activation!r}")
        if self.amask not in AMASKS:
            out.append(f"amask must be one of {AMASKS}, got {self.amask!r}")
        if self.conv_window not in (1, 2, 3, 4):
            out.append(f"conv_window must be in 1..4, got {self.conv_window!r}")
        if self.conv_activation not in ("none", "silu"):
            out.append(f"conv_activation must be 'none' or 'silu', got {self.conv_activation!r}")
        if self.norm not in NORMS:
            out.append(f"norm must be one of {NORMS}, got {self.norm!r}")
        if out:
            return out
        if self.norm == "softmax_norm":
            positive = self.order in ("squared", "exponential") or self.qk_activation == "relu"
            if not positive:
                out.append("softmax_norm requires a non-negative score image "
                           "(order squared/exponential, or linear with relu)")
        if self.order == "exponential" and self.norm != "softmax_norm":
            out.append("exponential order requires softmax_norm (unnormalized exp scores are unbounded)")
        return out

    @property
    def needs_dt(self) -> bool:
        return self.discretize_values or self.amask == "original"

    @property
    def softmax_norm(self) -> bool:
        return self.norm == "softmax_norm"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "VariantConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


LINEAR = VariantConfig(order="linear", qk_activation="relu", amask="none", conv_window=1,
                       norm="softmax_norm")
MAMBA2 = VariantConfig(order="linear", qk_activation="none", amask="original", conv_window=4,
                       conv_activation="silu", norm="output_rmsnorm", discretize_values=True,
                       d_residual=True, z_gate=True)
MAMBA2S = VariantConfig(order="linear", qk_activation="none", amask="softplus", conv_window=2,
                        norm="output_rmsnorm", discretize_values=True)
TWOMAMBA = VariantConfig(order="squared", qk_activation="none", amask="softplus", conv_window=2,
                         norm="softmax_norm")
TWOMAMBA_E = replace(TWOMAMBA, order="exponential")
SOFTMAX = VariantConfig(order="exponential", qk_activation="none", amask="none", conv_window=1,
                        norm="softmax_norm")

PRESETS = {
    "linear": LINEAR,
    "mamba2": MAMBA2,
    "mamba2s": MAMBA2S,
    "twomamba": TWOMAMBA,
    "twomamba_e": TWOMAMBA_E,
    "softmax": SOFTMAX,
}


def preset(name: str) -> VariantConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown preset {name!r}; valid presets: {', '.join(PRESETS)}")


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------


@dataclass
class BlockWeights:
    """Parameters of one attention block.

    ``W_QKV`` produces ``[Q | K | V]``, each head-major ``H * d_head`` wide.
    Optional fields are present exactly when the config uses them.
    """

    W_QKV: np.ndarray
    W_out: np.ndarray
    conv: ConvSpec
    rms_gain: np.ndarray
    n_heads: int
    d_head: int
    W_A: Optional[np.ndarray] = None
    W_dt: Optional[np.ndarray] = None
    dt_bias: Optional[np.ndarray] = None
    A_log: Optional[np.ndarray] = None
    D: Optional[np.ndarray] = None
    W_z: Optional[np.ndarray] = None

    @property
    def d_model(self) -> int:
        return self.W_QKV.shape[0]

    @property
    def inner(self) -> int:
        return self.n_heads * self.d_head

    def check(self, cfg: VariantConfig) -> None:
        """Raise if shapes or the set of optional tensors do not match ``cfg``."""
        d, inner, H = self.d_model, self.inner, self.n_heads
        expect = {
            "W_QKV": (d, 3 * inner),
            "W_out": (inner, d),
            "rms_gain": (inner,),
        }
        wanted = {
            "W_A": cfg.amask == "softplus",
            "W_dt": cfg.needs_dt,
            "dt_bias": cfg.needs_dt,
            "A_log": cfg.amask == "original",
            "D": cfg.d_residual,
            "W_z": cfg.z_gate,
        }
        shapes = {"W_A": (d, H), "W_dt": (d, H), "dt_bias": (H,), "A_log": (H,),
                  "D": (inner,), "W_z": (d, inner)}
        problems = []
        for name, shape in expect.items():
            if np.shape(getattr(self, name)) != shape:
                problems.append(f"{name} must be {shape}, got {np.shape(getattr(self, name))}")
        for name, needed in wanted.items():
            value = getattr(self, name)
            if needed and value is None:
                problems.append(f"config needs {name} but it is missing")
            elif not needed and value is not None:
                problems.append(f"{name} is present but the config does not use it")
            elif needed and np.shape(value) != shapes[name]:
                problems.append(f"{name} must be {shapes[name]}, got {np.shape(value)}")
        if self.conv.channels != 3 * inner:
            problems.append(f"conv must have {3 * inner} channels, got {self.conv.channels}")
        if self.conv.window != cfg.conv_window:
            problems.append(f"conv window {self.conv.window} != config window {cfg.conv_window}")
        if self.conv.activation != cfg.conv_activation:
            problems.append(f"conv activation {self.conv.activation!r} != config {cfg.conv_activation!r}")
        if problems:
            raise ConfigurationError("weights do not match config: " + "; ".join(problems))

    def arrays(self) -> dict[str, np.ndarray]:
        """Trainable tensors by name, conv weight/bias included."""
        out = {"W_QKV": self.W_QKV, "W_out": self.W_out, "rms_gain": self.rms_gain,
               "conv_weight": self.conv.weight}
        if self.conv.bias is not None:
            out["conv_bias"] = self.conv.bias
        for name in ("W_A", "W_dt", "dt_bias", "A_log", "D", "W_z"):
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        return out

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "BlockWeights":
        """Copy with some tensors replaced (names as in :meth:`arrays`)."""
        arrays = dict(arrays)
        conv = self.conv
        if "conv_weight" in arrays or "conv_bias" in arrays:
            conv = ConvSpec(weight=arrays.pop("conv_weight", conv.weight),
                            bias=arrays.pop("conv_bias", conv.bias),
                            activation=conv.activation)
        return replace(self, conv=conv, **arrays)

    def copy(self) -> "BlockWeights":
        return self.with_arrays({k: v.copy() for k, v in self.arrays().items()})


def init_dt_bias(n_heads: int, rng: np.random.Generator) -> np.ndarray:
    """Log-uniform ``dt`` in ``[DT_MIN, DT_MAX]`` pushed through softplus^-1."""
    lo, hi = np.log(DT_MIN), np.log(DT_MAX)
    dt = np.exp(rng.uniform(0.0, hi - lo, size=n_heads) + lo)
    return softplus_inverse(dt)


def init_block_weights(cfg: VariantConfig, d_model: int, n_heads: int, d_head: int,
                       rng: Optional[np.random.Generator] = None, dtype=np.float64) -> BlockWeights:
    """Gaussian projections with std ``1/sqrt(fan_in)``, identity conv, Mamba-2 dt/A init."""
    rng = np.random.default_rng() if rng is None else rng
    inner = n_heads * d_head

    def gauss(fan_in, shape):
        return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype)

    w = BlockWeights(
        W_QKV=gauss(d_model, (d_model, 3 * inner)),
        W_out=gauss(inner, (inner, d_model)),
        conv=ConvSpec.identity(3 * inner, cfg.conv_window, cfg.conv_activation, dtype=dtype),
        rms_gain=np.ones(inner, dtype=dtype),
        n_heads=n_heads,
        d_head=d_head,
    )
    if cfg.amask == "softplus":
        w.W_A = gauss(d_model, (d_model, n_heads))
    if cfg.needs_dt:
        w.W_dt = gauss(d_model, (d_model, n_heads))
        w.dt_bias = init_dt_bias(n_heads, rng).astype(dtype)
    if cfg.amask == "original":
        w.A_log = np.log(rng.uniform(*A_INIT_RANGE, size=n_heads)).astype(dtype)
    if cfg.d_residual:
        w.D = np.ones(inner, dtype=dtype)
    if cfg.z_gate:
        w.W_z = gauss(d_model, (d_model, inner))
    w.check(cfg)
    return w
