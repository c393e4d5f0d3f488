"""Plain strided CNN producing a fine-to-coarse feature pyramid.

Each stage downsamples by its stride ratio with 3x3 stride-2 convs (ReLU after
each) and ends in a linear 3x3 stride-1 "tap" conv whose output is that
stage's pyramid level. The next stage consumes ``relu(tap)``.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


class EncoderConfigError(ValueError):
    pass


class FrozenEncoderError(RuntimeError):
    pass


@dataclass
class EncoderConfig:
    in_channels: int = 3
    stage_channels: tuple[int, ...] = (16, 32, 64)
    stage_total_strides: tuple[int, ...] = (4, 8, 32)
    embed_dims: tuple[int, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.stage_total_strides = tuple(int(s) for s in self.stage_total_strides)
        if self.embed_dims is not None:
            self.embed_dims = tuple(int(d) for d in self.embed_dims)
        self.validate()

    @property
    def N(self) -> int:
        return len(self.stage_channels)

    @property
    def level_dims(self) -> tuple[int, ...]:
        return self.embed_dims if self.embed_dims is not None else self.stage_channels

    @property
    def coarsest_stride(self) -> int:
        return self.stage_total_strides[-1]

    def validate(self) -> None:
        s = self.stage_total_strides
        if len(s) != len(self.stage_channels):
            raise EncoderConfigError(
                f"{len(self.stage_channels)} stage channels but {len(s)} strides")
        if self.embed_dims is not None and len(self.embed_dims) != len(s):
            raise EncoderConfigError("embed_dims must have one entry per level")
        prev = 1
        for stride in s:
            if stride <= prev or stride % prev:
                raise EncoderConfigError(
                    f"strides must be strictly increasing and each divide the next: {s}")
            ratio = stride // prev
            if ratio & (ratio - 1):
                raise EncoderConfigError(f"stride ratio {ratio} is not a power of two")
            prev = stride

    @classmethod
    def stride4(cls, **kw) -> "EncoderConfig":
        """Finer configuration: evaluation level at stride 4 instead of 8."""
        return cls(stage_total_strides=(2, 4, 16), **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


@dataclass
class FeaturePyramid:
    levels: list[Tensor] = field(default_factory=list)

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, l: int) -> Tensor:
        """1-based level access, l = 1 (finest) .. N (coarsest)."""
        if not 1 <= l <= len(self.levels):
            raise IndexError(f"pyramid level {l} outside 1..{len(self.levels)}")
        return self.levels[l - 1]


def _layer_plan(cfg: EncoderConfig) -> list[tuple[str, int, int, int, bool]]:
    """(name, cin, cout, stride, is_tap) per conv, in execution order."""
    plan = []
    cin = cfg.in_channels
    prev = 1
    for i, (c, s) in enumerate(zip(cfg.stage_channels, cfg.stage_total_strides)):
        n_down = int(round(np.log2(s // prev)))
        for k in range(n_down):
            plan.append((f"s{i}.down{k}", cin, c, 2, False))
            cin = c
        plan.append((f"s{i}.tap", cin, c, 1, True))
        cin = c
        prev = s
    return plan


class Encoder:
    """Student encoder phi. Weights live in ``self.params`` (name -> Tensor)."""

    def __init__(self, config: EncoderConfig | None = None, params: dict[str, Tensor] | None = None):
        self.config = config or EncoderConfig()
        self.plan = _layer_plan(self.config)
        self.params = params if params is not None else self._init_params()

    def _init_params(self) -> dict[str, Tensor]:
        rng = np.random.default_rng(self.config.seed)
        params = {}
        for name, cin, cout, _, _ in self.plan:
            fan_in = 9 * cin
            bound = np.sqrt(6.0 / fan_in)  # Kaiming-uniform, ReLU gain
            params[f"{name}.w"] = Tensor(rng.uniform(-bound, bound, (3, 3, cin, cout)), requires_grad=True)
            params[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True)
        if self.config.embed_dims is not None:
            for l, (c, d) in enumerate(zip(self.config.stage_channels, self.config.embed_dims)):
                bound = np.sqrt(3.0 / c)
                params[f"embed{l}.w"] = Tensor(rng.uniform(-bound, bound, (1, 1, c, d)), requires_grad=True)
        return params

    def check_input(self, frames: np.ndarray | Tensor) -> None:
        shape = frames.shape
        s = self.config.coarsest_stride
        if shape[-3] % s or shape[-2] % s:
            raise EncoderConfigError(
                f"frame extent {shape[-3]}x{shape[-2]} must be a multiple of {s}")
        if shape[-1] != self.config.in_channels:
            raise EncoderConfigError(f"expected {self.config.in_channels} channels, got {shape[-1]}")

    def forward(self, frames, normalize: bool = True) -> FeaturePyramid:
        """Encode ``(H, W, C)`` or ``(B, H, W, C)`` frames.

        Levels keep the batch axis if the input had one. With ``normalize``
        every level is L2-normalized over channels.
        """
        x = T.as_tensor(frames)
        self.check_input(x)
        squeeze = x.ndim == 3
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        levels = []
        p = self.params
        for name, _, _, stride, is_tap in self.plan:
            x = T.conv2d(x, p[f"{name}.w"], p[f"{name}.b"], stride=stride, pad=1)
            if is_tap:
                feat = x
                l = len(levels)
                if f"embed{l}.w" in p:
                    feat = T.conv2d(feat, p[f"embed{l}.w"])
                if normalize:
                    feat = T.l2_normalize(feat)
                levels.append(T.reshape(feat, feat.shape[1:]) if squeeze else feat)
            x = T.relu(x)
        return FeaturePyramid(levels)

    __call__ = forward

    def level_shapes(self, H: int, W: int) -> list[tuple[int, int, int]]:
        return [(H // s, W // s, d) for s, d in zip(self.config.stage_total_strides, self.config.level_dims)]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise EncoderConfigError("state dict keys do not match encoder layout")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise EncoderConfigError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k] = Tensor(np.array(v, dtype=np.float64), requires_grad=True)

    def copy(self) -> "Encoder":
        return Encoder(copy.deepcopy(self.config),
                       {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()})


class FrozenEncoder:
    """Read-only teacher: weights are non-writeable arrays, passes record nothing."""

    def __init__(self, encoder: Encoder):
        self.config = copy.deepcopy(encoder.config)
        frozen = {}
        for k, v in encoder.params.items():
            arr = v.data.copy()
            arr.flags.writeable = False
            frozen[k] = Tensor(arr, requires_grad=False)
        self._inner = Encoder(self.config, frozen)

    @property
    def params(self):
        return self._inner.params

    def forward(self, frames, normalize: bool = True) -> FeaturePyramid:
        with T.no_grad_enabled():
            return self._inner.forward(frames, normalize=normalize)

    __call__ = forward

    def state_dict(self):
        return self._inner.state_dict()


def freeze(encoder: Encoder) -> FrozenEncoder:
    return FrozenEncoder(encoder)


def encode_pyramid(frame, encoder: Encoder | FrozenEncoder, normalize: bool = True) -> FeaturePyramid:
    return encoder.forward(frame, normalize=normalize)


def momentum_update(teacher: dict[str, Tensor], student: dict[str, Tensor], m: float) -> None:
    """In-place EMA of teacher weights: theta_t <- m * theta_t + (1 - m) * theta_s."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {m}")
    if set(teacher) != set(student):
        raise EncoderConfigError("momentum_update: parameter names differ")
    for k, t in teacher.items():
        s = student[k]
        if t.shape != s.shape:
            raise EncoderConfigError(f"momentum_update: {k} shapes {t.shape} vs {s.shape}")
        if not t.data.flags.writeable:
            raise FrozenEncoderError("momentum_update: teacher weights are frozen")
        t.data = m * t.data + (1.0 - m) * s.data
