"""Small U-Net used for both the source teacher and the target student."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .tensor import DTYPE, ShapeError, Tensor


@dataclass(frozen=True)
class SegNetConfig:
    in_channels: int = 4
    num_classes: int = 4
    base_width: int = 8
    depth: int = 3
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_width < 1:
            raise ValueError("base_width must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def _block_specs(cfg: SegNetConfig) -> List[tuple]:
    """(prefix, cin, cout) for every 3x3 conv+BN+ReLU block, in forward order."""
    w = cfg.base_width
    specs = []
    cin = cfg.in_channels
    for level in range(cfg.depth):
        cout = w * 2 ** level
        specs += [(f"enc{level}.0", cin, cout), (f"enc{level}.1", cout, cout)]
        cin = cout
    bott = w * 2 ** cfg.depth
    specs += [("mid.0", cin, bott), ("mid.1", bott, bott)]
    cin = bott
    for level in reversed(range(cfg.depth)):
        cout = w * 2 ** level
        specs += [(f"dec{level}.0", cin + cout, cout), (f"dec{level}.1", cout, cout)]
        cin = cout
    return specs


class SegNet:
    """Encoder-decoder with concatenated skips, BN, ReLU and bottleneck dropout.

    Parameters live in ``self.params`` (trainable, declaration order) and
    batch-norm running statistics in ``self.buffers``.
    """

    def __init__(self, config: SegNetConfig):
        self.config = config
        self.params: Dict[str, Tensor] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self.training = True
        for prefix, cin, cout in _block_specs(config):
            self.params[f"{prefix}.conv.weight"] = Tensor(np.zeros((cout, cin, 3, 3)), requires_grad=True)
            self.params[f"{prefix}.bn.weight"] = Tensor(np.ones(cout), requires_grad=True)
            self.params[f"{prefix}.bn.bias"] = Tensor(np.zeros(cout), requires_grad=True)
            self.buffers[f"{prefix}.bn.running_mean"] = np.zeros(cout, dtype=DTYPE)
            self.buffers[f"{prefix}.bn.running_var"] = np.ones(cout, dtype=DTYPE)
        w = config.base_width
        self.params["head.weight"] = Tensor(np.zeros((config.num_classes, w, 1, 1)), requires_grad=True)
        self.params["head.bias"] = Tensor(np.zeros(config.num_classes), requires_grad=True)
        for name, p in self.params.items():
            p.name = name

    # -- mode / bookkeeping ------------------------------------------------
    def train(self) -> "SegNet":
        self.training = True
        return self

    def eval(self) -> "SegNet":
        self.training = False
        return self

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        T.zero_grad(self.parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Parameters then buffers, copied, in declaration order."""
        state = {k: p.data.copy() for k, p in self.params.items()}
        state.update({k: b.copy() for k, b in self.buffers.items()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        expected = set(self.params) | set(self.buffers)
        missing = expected - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)[:5]}")
        for k, p in self.params.items():
            arr = np.asarray(state[k], dtype=DTYPE)
            if arr.shape != p.shape:
                raise ShapeError(f"{k}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.copy()
        for k, b in self.buffers.items():
            arr = np.asarray(state[k], dtype=DTYPE)
            if arr.shape != b.shape:
                raise ShapeError(f"{k}: expected shape {b.shape}, got {arr.shape}")
            self.buffers[k] = arr.copy()

    # -- forward ----------------------------------------------------------
    def _block(self, x: Tensor, prefix: str) -> Tensor:
        x = T.conv2d(x, self.params[f"{prefix}.conv.weight"], padding=1)
        x = T.batchnorm2d(
            x,
            self.params[f"{prefix}.bn.weight"],
            self.params[f"{prefix}.bn.bias"],
            self.buffers[f"{prefix}.bn.running_mean"],
            self.buffers[f"{prefix}.bn.running_var"],
            self.training,
        )
        return T.relu(x)

    def forward(self, image, rng: Optional[np.random.Generator] = None) -> Tensor:
        """Map an (N, in_channels, H, W) image batch to per-pixel class logits."""
        x = image if isinstance(image, Tensor) else Tensor(image)
        cfg = self.config
        if x.ndim != 4:
            raise ShapeError(f"expected a 4-d image batch, got shape {x.shape}")
        if x.shape[1] != cfg.in_channels:
            raise ShapeError(f"expected {cfg.in_channels} input channels, got {x.shape[1]}")
        step = 2 ** cfg.depth
        if x.shape[2] % step or x.shape[3] % step:
            raise ShapeError(f"spatial size {x.shape[2]}x{x.shape[3]} must be divisible by {step}")

        skips = []
        for level in range(cfg.depth):
            x = self._block(self._block(x, f"enc{level}.0"), f"enc{level}.1")
            skips.append(x)
            x = T.maxpool2d(x, 2)
        x = self._block(self._block(x, "mid.0"), "mid.1")
        x = T.dropout(x, cfg.dropout_rate, self.training, rng)
        for level in reversed(range(cfg.depth)):
            x = T.concat([T.upsample_nearest(x, 2), skips[level]], axis=1)
            x = self._block(self._block(x, f"dec{level}.0"), f"dec{level}.1")
        return T.conv2d(x, self.params["head.weight"], self.params["head.bias"])

    __call__ = forward


def init_parameters(config: SegNetConfig, seed: int) -> SegNet:
    """Fresh network: He-normal conv kernels, unit BN scale, zero shifts."""
    net = SegNet(config)
    rng = np.random.default_rng(seed)
    for name, p in net.params.items():
        if name.endswith("conv.weight") or name == "head.weight":
            fan_in = int(np.prod(p.shape[1:]))
            p.data = (rng.standard_normal(p.shape) * np.sqrt(2.0 / fan_in)).astype(DTYPE)
    return net
