"""Four parallel attention U-Net branches with learned softmax fusion.

Each branch is an identical architecture at its own input resolution
(full, 1/2, 1/4, 1/8): a three-level encoder of double-conv blocks, a
dropout bottleneck, and a decoder whose skip connections pass through
additive attention gates.  Branch logit maps are bilinearly upsampled to
the full resolution and combined as a convex combination whose weights are
the softmax of four trainable logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .engine import (
    Tensor,
    add,
    batchnorm2d,
    concat_channels,
    conv2d,
    dropout_channels,
    relu,
    scale_by_index,
    scale_spatial,
    sigmoid,
    softmax1d,
    upsample_bilinear,
)

FUSION_PRIOR = (0.40, 0.25, 0.20, 0.15)


@dataclass
class ModelOutputs:
    fused: Tensor                 # [N,1,R,R] logits
    branch_logits: list[Tensor]   # four maps at native branch resolutions
    fusion_weights: np.ndarray    # softmax snapshot, shape (4,)


def _kaiming_conv(rng: np.random.Generator, out_c: int, in_c: int, k: int,
                  dtype) -> np.ndarray:
    std = np.sqrt(2.0 / (in_c * k * k))
    return (rng.standard_normal((out_c, in_c, k, k)) * std).astype(dtype)


class VesselNet:
    """Parameter container plus forward passes.

    ``params`` maps name -> trainable Tensor; ``buffers`` maps name ->
    numpy array (batchnorm running statistics).  Both dictionaries keep
    insertion order, which fixes the serialization order in checkpoints.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(seed)
        for k in range(4):
            self._init_branch(f"b{k + 1}", rng)
        logits = np.log(np.asarray(FUSION_PRIOR, dtype=np.float64)).astype(dtype)
        self.params["fusion.logits"] = Tensor(logits, requires_grad=True)

    # --- construction -----------------------------------------------------

    def _add_conv(self, name: str, rng, in_c: int, out_c: int, k: int) -> None:
        self.params[f"{name}.w"] = Tensor(_kaiming_conv(rng, out_c, in_c, k, self.dtype),
                                          requires_grad=True)
        self.params[f"{name}.b"] = Tensor(np.zeros(out_c, dtype=self.dtype),
                                          requires_grad=True)

    def _add_bn(self, name: str, c: int) -> None:
        self.params[f"{name}.gamma"] = Tensor(np.ones(c, dtype=self.dtype), requires_grad=True)
        self.params[f"{name}.beta"] = Tensor(np.zeros(c, dtype=self.dtype), requires_grad=True)
        self.buffers[f"{name}.rmean"] = np.zeros(c, dtype=self.dtype)
        self.buffers[f"{name}.rvar"] = np.ones(c, dtype=self.dtype)

    def _add_double_conv(self, name: str, rng, in_c: int, out_c: int) -> None:
        self._add_conv(f"{name}.conv1", rng, in_c, out_c, 3)
        self._add_bn(f"{name}.bn1", out_c)
        self._add_conv(f"{name}.conv2", rng, out_c, out_c, 3)
        self._add_bn(f"{name}.bn2", out_c)

    def _add_gate(self, name: str, rng, skip_c: int) -> None:
        inter = max(1, skip_c // 2)
        self._add_conv(f"{name}.wg", rng, skip_c, inter, 1)
        self._add_conv(f"{name}.wx", rng, skip_c, inter, 1)
        self._add_conv(f"{name}.psi", rng, inter, 1, 1)

    def _init_branch(self, prefix: str, rng) -> None:
        cfg = self.cfg
        chans = cfg.encoder_channels
        prev = cfg.in_channels
        for i, c in enumerate(chans, 1):
            self._add_double_conv(f"{prefix}.enc{i}", rng, prev, c)
            prev = c
        self._add_double_conv(f"{prefix}.bot", rng, prev, cfg.bottleneck_channels)
        prev = cfg.bottleneck_channels
        for i in range(len(chans), 0, -1):
            c = chans[i - 1]
            self._add_conv(f"{prefix}.dec{i}.up", rng, prev, c, 3)
            self._add_bn(f"{prefix}.dec{i}.upbn", c)
            self._add_gate(f"{prefix}.dec{i}.gate", rng, c)
            self._add_double_conv(f"{prefix}.dec{i}", rng, 2 * c, c)
            prev = c
        self._add_conv(f"{prefix}.head", rng, prev, 1, 1)

    # --- forward ----------------------------------------------------------

    def _conv(self, name: str, x: Tensor, padding: int) -> Tensor:
        return conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], padding=padding)

    def _bn(self, name: str, x: Tensor, training: bool) -> Tensor:
        return batchnorm2d(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
                           self.buffers[f"{name}.rmean"], self.buffers[f"{name}.rvar"],
                           training=training)

    def _double_conv(self, name: str, x: Tensor, training: bool) -> Tensor:
        x = relu(self._bn(f"{name}.bn1", self._conv(f"{name}.conv1", x, 1), training))
        return relu(self._bn(f"{name}.bn2", self._conv(f"{name}.conv2", x, 1), training))

    def attention_gate(self, name: str, skip: Tensor, gate: Tensor) -> Tensor:
        """alpha = sigmoid(psi(relu(Wg*gate + Wx*skip))); returns alpha * skip."""
        if skip.data.shape != gate.data.shape:
            raise ValueError(
                f"attention_gate: skip {skip.data.shape} and gate {gate.data.shape} must align")
        mixed = relu(add(self._conv(f"{name}.wg", gate, 0), self._conv(f"{name}.wx", skip, 0)))
        alpha = sigmoid(self._conv(f"{name}.psi", mixed, 0))
        return scale_spatial(skip, alpha)

    def branch_forward(self, prefix: str, x: Tensor, training: bool,
                       rng: np.random.Generator | None = None) -> Tensor:
        from .engine import pool2d  # local import keeps module init light

        cfg = self.cfg
        levels = len(cfg.encoder_channels)
        r = x.data.shape[-1]
        if r % (2 ** levels):
            raise ValueError(f"branch_forward: resolution {r} not divisible by {2 ** levels}")
        skips = []
        h = x
        for i in range(1, levels + 1):
            h = self._double_conv(f"{prefix}.enc{i}", h, training)
            skips.append(h)
            h = pool2d(h, "max", 2)
        h = self._double_conv(f"{prefix}.bot", h, training)
        if training:
            if rng is None:
                raise ValueError("branch_forward: training mode requires an rng for dropout")
            h = dropout_channels(h, cfg.dropout, rng, training)
        for i in range(levels, 0, -1):
            skip = skips[i - 1]
            up = upsample_bilinear(h, skip.data.shape[2], skip.data.shape[3])
            up = relu(self._bn(f"{prefix}.dec{i}.upbn",
                               self._conv(f"{prefix}.dec{i}.up", up, 1), training))
            gated = self.attention_gate(f"{prefix}.dec{i}.gate", skip, up)
            h = self._double_conv(f"{prefix}.dec{i}", concat_channels(gated, up), training)
        return self._conv(f"{prefix}.head", h, 0)

    def fusion_weights(self) -> np.ndarray:
        logits = self.params["fusion.logits"].data.astype(np.float64)
        e = np.exp(logits - logits.max())
        return e / e.sum()

    def forward(self, x_full: Tensor, training: bool = False,
                rng: np.random.Generator | None = None) -> ModelOutputs:
        cfg = self.cfg
        full = cfg.full_resolution
        if x_full.data.shape[1] != cfg.in_channels or x_full.data.shape[2:] != (full, full):
            raise ValueError(
                f"forward: expected [N,{cfg.in_channels},{full},{full}], got {x_full.data.shape}")
        weights = softmax1d(self.params["fusion.logits"])
        branch_logits = []
        fused = None
        for k, res in enumerate(cfg.branch_resolutions):
            xk = x_full if res == full else upsample_bilinear(x_full, res, res)
            logit = self.branch_forward(f"b{k + 1}", xk, training, rng)
            branch_logits.append(logit)
            up = logit if res == full else upsample_bilinear(logit, full, full)
            term = scale_by_index(up, weights, k)
            fused = term if fused is None else add(fused, term)
        return ModelOutputs(fused=fused, branch_logits=branch_logits,
                            fusion_weights=weights.data.copy())

    # --- bookkeeping --------------------------------------------------------

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {name: p.grad for name, p in self.params.items() if p.grad is not None}

    def parameter_count(self) -> dict[str, int]:
        """Trainable scalar counts per branch plus fusion and total."""
        counts: dict[str, int] = {}
        for name, p in self.params.items():
            group = name.split(".")[0] if name.startswith("b") else "fusion"
            counts[group] = counts.get(group, 0) + p.data.size
        counts["total"] = sum(v for k, v in counts.items())
        return counts

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters followed by buffers, in construction order."""
        out = {name: p.data for name, p in self.params.items()}
        for name, b in self.buffers.items():
            out[f"buffer.{name}"] = b
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            src = arrays[name]
            if src.shape != p.data.shape:
                raise ValueError(f"load_state: shape mismatch for {name}")
            p.data = src.astype(self.dtype, copy=True)
        for name in self.buffers:
            self.buffers[name] = arrays[f"buffer.{name}"].astype(self.dtype, copy=True)
