"""A tiny pre-norm block stack with a hand-written backward pass.

Each layer is ``x += attn(rmsnorm(x))`` then ``x += W2 silu(W1 rmsnorm(x))``;
the unembedding is tied to the (sqrt(d)-scaled) input embedding.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np

from ..backward import block_backward, rmsnorm_backward, silu_grad
from ..config import BlockWeights, VariantConfig, init_block_weights, preset
from ..errors import ConfigurationError
from ..forward import RMS_EPS, block_forward
from ..tensorops import silu


@dataclass
class TinyModelConfig:
    d_model: int = 64
    n_heads: int = 4
    d_head: int = 16
    n_layers: int = 2
    vocab: int = 32
    seq_len: int = 64
    variant: Union[str, VariantConfig] = "twomamba"
    mlp_mult: int = 2
    optimizer: str = "adam"
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    warmup_steps: Optional[int] = None  # default: 5% of total_steps
    total_steps: int = 2000
    weight_decay: float = 0.01
    batch_size: int = 32
    eval_every: int = 100
    eval_batches: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.d_model != self.n_heads * self.d_head:
            raise ConfigurationError(
                f"d_model ({self.d_model}) must equal n_heads * d_head ({self.n_heads * self.d_head})")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.warmup_steps is None:
            self.warmup_steps = max(1, self.total_steps // 20)

    @property
    def variant_config(self) -> VariantConfig:
        return preset(self.variant) if isinstance(self.variant, str) else self.variant

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(self.variant, VariantConfig):
            d["variant"] = self.variant.to_dict()
        d["betas"] = list(self.betas)
        return d


def _rms(x, gain):
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return x / r * gain, r


@dataclass
class TinyModel:
    cfg: TinyModelConfig
    params: dict = field(default_factory=dict)
    blocks: list = field(default_factory=list)

    @classmethod
    def init(cls, cfg: TinyModelConfig, rng: Optional[np.random.Generator] = None) -> "TinyModel":
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        d, hidden = cfg.d_model, cfg.mlp_mult * cfg.d_model
        vcfg = cfg.variant_config
        params = {"embed": rng.standard_normal((cfg.vocab, d)) / np.sqrt(d), "gf": np.ones(d)}
        blocks = []
        for i in range(cfg.n_layers):
            bw = init_block_weights(vcfg, d, cfg.n_heads, cfg.d_head, rng)
            blocks.append(bw)
            for name, arr in bw.arrays().items():
                params[f"l{i}.attn.{name}"] = arr
            params[f"l{i}.g1"] = np.ones(d)
            params[f"l{i}.g2"] = np.ones(d)
            params[f"l{i}.W1"] = rng.standard_normal((d, hidden)) / np.sqrt(d)
            params[f"l{i}.W2"] = rng.standard_normal((hidden, d)) / np.sqrt(hidden)
        return cls(cfg=cfg, params=params, blocks=blocks)

    def block(self, i: int) -> BlockWeights:
        prefix = f"l{i}.attn."
        arrays = {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}
        return self.blocks[i].with_arrays(arrays)

    # -- forward / backward -------------------------------------------------

    def forward(self, tokens: np.ndarray):
        """Logits ``[B, N, vocab]`` and the activations the backward needs."""
        p, cfg = self.params, self.cfg
        vcfg = cfg.variant_config
        scale = np.sqrt(cfg.d_model)
        x = p["embed"][tokens] * scale
        caches = []
        for i in range(cfg.n_layers):
            bw = self.block(i)
            n1, r1 = _rms(x, p[f"l{i}.g1"])
            a, ac = block_forward(n1, vcfg, bw)
            x1 = x + a
            n2, r2 = _rms(x1, p[f"l{i}.g2"])
            u = n2 @ p[f"l{i}.W1"]
            s = silu(u)
            x2 = x1 + s @ p[f"l{i}.W2"]
            caches.append((x, r1, ac, bw, x1, n2, r2, u, s))
            x = x2
        nf, rf = _rms(x, p["gf"])
        logits = nf @ p["embed"].T
        return logits, (tokens, caches, x, nf, rf)

    def backward(self, dlogits: np.ndarray, fcache) -> dict[str, np.ndarray]:
        p, cfg = self.params, self.cfg
        tokens, caches, x, nf, rf = fcache
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        grads["embed"] += dlogits.reshape(-1, cfg.vocab).T @ nf.reshape(-1, cfg.d_model)
        dnf = dlogits @ p["embed"]
        dx, grads["gf"] = rmsnorm_backward(dnf, x, p["gf"], rf)
        for i in reversed(range(cfg.n_layers)):
            x0, r1, ac, bw, x1, n2, r2, u, s = caches[i]
            W1, W2 = p[f"l{i}.W1"], p[f"l{i}.W2"]
            flat = dx.reshape(-1, cfg.d_model)
            grads[f"l{i}.W2"] = s.reshape(-1, s.shape[-1]).T @ flat
            du = (dx @ W2.T) * silu_grad(u)
            grads[f"l{i}.W1"] = n2.reshape(-1, cfg.d_model).T @ du.reshape(-1, du.shape[-1])
            dn2 = du @ W1.T
            d_x1, grads[f"l{i}.g2"] = rmsnorm_backward(dn2, x1, p[f"l{i}.g2"], r2)
            dx = dx + d_x1
            dn1, bgrads = block_backward(dx, ac, bw)
            for name, g in bgrads.items():
                grads[f"l{i}.attn.{name}"] = g
            d_x0, grads[f"l{i}.g1"] = rmsnorm_backward(dn1, x0, p[f"l{i}.g1"], r1)
            dx = dx + d_x0
        np.add.at(grads["embed"], tokens, dx * np.sqrt(cfg.d_model))
        return grads


def cross_entropy(logits, targets, mask):
    """Mean masked cross-entropy and its gradient w.r.t. ``logits``."""
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    count = max(int(mask.sum()), 1)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / count
    probs = np.exp(logp)
    dlogits = probs
    np.put_along_axis(dlogits, targets[..., None], np.take_along_axis(probs, targets[..., None], -1) - 1.0, -1)
    dlogits = dlogits * (mask[..., None] / count)
    return float(loss), dlogits


def masked_accuracy(logits, targets, mask) -> float:
    hit = (logits.argmax(axis=-1) == targets) & mask
    return float(hit.sum() / max(int(mask.sum()), 1))


def loss_and_grads(model: TinyModel, tokens, targets, mask):
    logits, cache = model.forward(tokens)
    loss, dlogits = cross_entropy(logits, targets, mask)
    return loss, model.backward(dlogits, cache), logits
