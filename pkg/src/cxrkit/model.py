"""Dense-block encoder with three heads.

One shared convolutional trunk (densely connected blocks separated by
downsampling transitions) feeds an abnormality classifier, a spatial-region
classifier, and an optional segmentation decoder. All heads end in sigmoids,
so every output lands in [0, 1].

Layout, in forward order:

* stem: 3x3 conv (grayscale replicated to 3 input channels), batch norm,
  relu, 2x average pool
* dense block i: each layer is batch norm -> relu -> 3x3 conv producing
  ``growth_rate`` channels, concatenated onto everything before it
* transition (between blocks): batch norm, 1x1 conv halving the channels,
  2x average pool
* classifier heads: global average pool, then one affine map per head
* decoder (from the last dense block's feature maps): per stage
  nearest-upsample, 3x3 conv, batch norm, relu; then a 1x1 conv to 2
  channels

Parameter initialization is He-uniform for every weight and zero for every
bias, drawn in construction order from one seeded generator, so two builds
with the same config are bit-identical.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops
from .exceptions import CheckpointError, ConfigError, ShapeError

_MAGIC = b"CXRK"
_CHECKPOINT_VERSION = 1


def _as_stage_tuple(stages):
    out = []
    for entry in stages:
        pair = tuple(int(v) for v in entry)
        if len(pair) != 2:
            raise ConfigError(f"decoder stage must be (factor, channels), got {entry!r}")
        out.append(pair)
    return tuple(out)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description.

    ``decoder_stages`` is a tuple of (upsample factor, channels) pairs whose
    factors must multiply the encoder grid back up to ``input_size``. ``None``
    derives a ladder of x2 stages automatically; an empty tuple builds no
    decoder at all (classification-only network).
    """

    input_size: int = 64
    dense_block_sizes: tuple = (2, 2, 2)
    growth_rate: int = 8
    num_abnormality_classes: int = 26
    num_spatial_classes: int = 9
    decoder_stages: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dense_block_sizes",
                           tuple(int(k) for k in self.dense_block_sizes))
        if self.decoder_stages is not None:
            object.__setattr__(self, "decoder_stages",
                               _as_stage_tuple(self.decoder_stages))
        if not self.dense_block_sizes or min(self.dense_block_sizes) < 1:
            raise ConfigError(f"dense_block_sizes must be positive, got {self.dense_block_sizes}")
        if self.growth_rate < 1:
            raise ConfigError(f"growth_rate must be >= 1, got {self.growth_rate}")
        if self.num_abnormality_classes < 1:
            raise ConfigError("need at least one abnormality class")
        if self.num_spatial_classes < 1:
            raise ConfigError("need at least one spatial class")
        halvings = len(self.dense_block_sizes)   # stem pool + one per transition
        if self.input_size < 2 ** halvings or self.input_size % 2 ** halvings:
            raise ConfigError(
                f"input_size {self.input_size} is not divisible by the "
                f"{halvings} factor-2 downsamplings of this block structure")
        if self.decoder_stages:
            scale = math.prod(f for f, _ in self.decoder_stages)
            if any(f < 1 or c < 1 for f, c in self.decoder_stages):
                raise ConfigError(f"bad decoder stage in {self.decoder_stages}")
            if self.encoder_grid * scale != self.input_size:
                raise ConfigError(
                    f"decoder upsampling x{scale} maps the {self.encoder_grid} grid to "
                    f"{self.encoder_grid * scale}, not back to {self.input_size}")

    @property
    def encoder_grid(self) -> int:
        """Spatial side length of the last dense block's feature maps."""
        return self.input_size // 2 ** len(self.dense_block_sizes)

    @property
    def encoder_channels(self) -> int:
        c = 2 * self.growth_rate
        for i, k in enumerate(self.dense_block_sizes):
            c += k * self.growth_rate
            if i < len(self.dense_block_sizes) - 1:
                c = max(c // 2, 1)
        return c

    @property
    def num_encoder_convs(self) -> int:
        """Stem conv + one conv per dense layer + one per transition."""
        return 1 + sum(self.dense_block_sizes) + len(self.dense_block_sizes) - 1

    def resolved_decoder_stages(self) -> tuple:
        if self.decoder_stages is not None:
            return self.decoder_stages
        stages, c = [], self.encoder_channels
        for _ in range(len(self.dense_block_sizes)):
            c = max(c // 2, 4)
            stages.append((2, c))
        return tuple(stages)

    def to_dict(self) -> dict:
        stages = self.decoder_stages
        return {
            "input_size": self.input_size,
            "dense_block_sizes": list(self.dense_block_sizes),
            "growth_rate": self.growth_rate,
            "num_abnormality_classes": self.num_abnormality_classes,
            "num_spatial_classes": self.num_spatial_classes,
            "decoder_stages": None if stages is None else [list(p) for p in stages],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        stages = d.get("decoder_stages")
        if stages is not None:
            d["decoder_stages"] = _as_stage_tuple(stages)
        if "dense_block_sizes" in d:
            d["dense_block_sizes"] = tuple(d["dense_block_sizes"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad model config: {exc}") from exc


def full_scale_config(growth_rate: int = 8, seed: int = 0) -> ModelConfig:
    """Full-size layout: 5 dense blocks, 121 encoder convs, 512 px input,
    16x16 grid under the global pool. Width defaults modestly so a forward
    pass stays feasible on a plain CPU; depth and geometry are the point."""
    return ModelConfig(input_size=512, dense_block_sizes=(24, 24, 24, 24, 20),
                       growth_rate=growth_rate, num_abnormality_classes=26,
                       num_spatial_classes=9, seed=seed)


@dataclass
class ModelOutput:
    """One batch of head outputs.

    abnormality_probs: (B, D), spatial_probs: (B, F), seg_map: (B, 2, N, N)
    or None when the model has no decoder. All values in [0, 1].
    """

    abnormality_probs: Tensor
    spatial_probs: Tensor
    seg_map: Tensor | None


class Model:
    """Built network: named parameter tensors plus batch-norm running stats.

    ``params`` maps name -> Tensor (requires_grad) in construction order;
    ``bn_stats`` maps name -> writable float64 array, updated in place by
    training-mode forward passes. Checkpoints serialize both in this order.
    """

    def __init__(self, config: ModelConfig):
        if not isinstance(config, ModelConfig):
            raise ConfigError(f"expected a ModelConfig, got {type(config).__name__}")
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.bn_stats: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(config.seed)

        c = 2 * config.growth_rate
        self._add_conv(rng, "stem.conv", 3, c, 3)
        self._add_bn("stem.bn", c)
        for bi, k in enumerate(config.dense_block_sizes):
            for li in range(k):
                self._add_bn(f"block{bi}.layer{li}.bn", c)
                self._add_conv(rng, f"block{bi}.layer{li}.conv", c, config.growth_rate, 3)
                c += config.growth_rate
            if bi < len(config.dense_block_sizes) - 1:
                self._add_bn(f"trans{bi}.bn", c)
                out = max(c // 2, 1)
                self._add_conv(rng, f"trans{bi}.conv", c, out, 1)
                c = out
        self.encoder_channels = c
        self._add_dense(rng, "head.abn", c, config.num_abnormality_classes)
        self._add_dense(rng, "head.loc", c, config.num_spatial_classes)
        self.decoder_stages = config.resolved_decoder_stages()
        z = c
        for i, (_, ch) in enumerate(self.decoder_stages):
            self._add_conv(rng, f"dec{i}.conv", z, ch, 3)
            self._add_bn(f"dec{i}.bn", ch)
            z = ch
        if self.decoder_stages:
            self._add_conv(rng, "dec_out.conv", z, 2, 1)

    # -------------------------------------------------------- construction

    def _add_conv(self, rng, name, cin, cout, k):
        limit = math.sqrt(6.0 / (cin * k * k))
        w = rng.uniform(-limit, limit, size=(cout, cin, k, k))
        self.params[name + ".w"] = Tensor(w, requires_grad=True)
        self.params[name + ".b"] = Tensor(np.zeros(cout), requires_grad=True)

    def _add_dense(self, rng, name, cin, cout):
        limit = math.sqrt(6.0 / cin)
        w = rng.uniform(-limit, limit, size=(cin, cout))
        self.params[name + ".w"] = Tensor(w, requires_grad=True)
        self.params[name + ".b"] = Tensor(np.zeros(cout), requires_grad=True)

    def _add_bn(self, name, c):
        self.params[name + ".gamma"] = Tensor(np.ones(c), requires_grad=True)
        self.params[name + ".beta"] = Tensor(np.zeros(c), requires_grad=True)
        self.bn_stats[name + ".mean"] = np.zeros(c)
        self.bn_stats[name + ".var"] = np.ones(c)

    # -------------------------------------------------------- inference

    def _bn(self, name, x, training):
        return ops.batch_norm(x, self.params[name + ".gamma"], self.params[name + ".beta"],
                              self.bn_stats[name + ".mean"], self.bn_stats[name + ".var"],
                              training=training)

    def _prepare(self, images) -> Tensor:
        n = self.config.input_size
        arr = np.asarray(images, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or arr.shape[1:] != (n, n):
            raise ShapeError(f"expected images of shape (batch, {n}, {n}), got {arr.shape}")
        return Tensor(np.repeat(arr[:, None], 3, axis=1))

    def forward(self, images, training: bool = False) -> ModelOutput:
        """Run one batch of (B, N, N) images in [0, 1] through every head.

        Training mode normalizes with batch statistics and updates the
        running stats in place; eval mode reads the running stats.
        """
        p = self.params
        x = self._prepare(images)
        h = ops.conv2d(x, p["stem.conv.w"], p["stem.conv.b"], padding=1)
        h = ops.relu(self._bn("stem.bn", h, training))
        h = ops.avg_pool2d(h, 2)
        last = len(self.config.dense_block_sizes) - 1
        for bi, k in enumerate(self.config.dense_block_sizes):
            for li in range(k):
                name = f"block{bi}.layer{li}"
                y = ops.relu(self._bn(f"{name}.bn", h, training))
                y = ops.conv2d(y, p[f"{name}.conv.w"], p[f"{name}.conv.b"], padding=1)
                h = ops.concat_channels([h, y])
            if bi < last:
                h = self._bn(f"trans{bi}.bn", h, training)
                h = ops.conv2d(h, p[f"trans{bi}.conv.w"], p[f"trans{bi}.conv.b"])
                h = ops.avg_pool2d(h, 2)
        pooled = ops.global_avg_pool(h)
        abn = ops.sigmoid(ops.dense(pooled, p["head.abn.w"], p["head.abn.b"]))
        loc = ops.sigmoid(ops.dense(pooled, p["head.loc.w"], p["head.loc.b"]))
        seg = None
        if self.decoder_stages:
            z = h                        # last dense block's feature maps
            for i, (f, _) in enumerate(self.decoder_stages):
                z = ops.upsample_nearest(z, f)
                z = ops.conv2d(z, p[f"dec{i}.conv.w"], p[f"dec{i}.conv.b"], padding=1)
                z = ops.relu(self._bn(f"dec{i}.bn", z, training))
            seg = ops.sigmoid(ops.conv2d(z, p["dec_out.conv.w"], p["dec_out.conv.b"]))
        return ModelOutput(abnormality_probs=abn, spatial_probs=loc, seg_map=seg)

    __call__ = forward

    # -------------------------------------------------------- parameters

    def parameters(self) -> dict:
        """Live name -> Tensor mapping in construction (= checkpoint) order."""
        return self.params

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def parameter_vector(self) -> np.ndarray:
        """All parameters flattened and concatenated in construction order."""
        return np.concatenate([t.data.ravel() for t in self.params.values()])

    @property
    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    # -------------------------------------------------------- checkpointing

    def save(self, path):
        """Versioned binary container; layout documented in docs/formats.md."""
        header = json.dumps({
            "config": self.config.to_dict(),
            "params": [[k, list(v.shape)] for k, v in self.params.items()],
            "stats": [[k, list(v.shape)] for k, v in self.bn_stats.items()],
        }, sort_keys=True).encode("utf-8")
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(struct.pack("<II", _CHECKPOINT_VERSION, len(header)))
            f.write(header)
            for t in self.params.values():
                f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
            for a in self.bn_stats.values():
                f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "Model":
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) < 12 or raw[:4] != _MAGIC:
            raise CheckpointError(f"{path}: not a model checkpoint")
        version, hlen = struct.unpack_from("<II", raw, 4)
        if version != _CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        if len(raw) < 12 + hlen:
            raise CheckpointError(f"{path}: truncated header")
        try:
            header = json.loads(raw[12:12 + hlen].decode("utf-8"))
            config = ModelConfig.from_dict(header["config"])
            declared_params = [(k, tuple(s)) for k, s in header["params"]]
            declared_stats = [(k, tuple(s)) for k, s in header["stats"]]
        except (ValueError, KeyError, ConfigError) as exc:
            raise CheckpointError(f"{path}: bad checkpoint header: {exc}") from exc

        model = cls(config)
        expect_params = [(k, v.shape) for k, v in model.params.items()]
        expect_stats = [(k, v.shape) for k, v in model.bn_stats.items()]
        if declared_params != expect_params or declared_stats != expect_stats:
            raise CheckpointError(f"{path}: checkpoint does not match its own config echo")

        offset = 12 + hlen
        arrays = []
        for _, shape in declared_params + declared_stats:
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            nbytes = count * 8
            if offset + nbytes > len(raw):
                raise CheckpointError(f"{path}: truncated parameter payload")
            arrays.append(np.frombuffer(raw, dtype="<f8", count=count,
                                        offset=offset).reshape(shape).astype(np.float64))
            offset += nbytes
        if offset != len(raw):
            raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")

        for (name, _), arr in zip(declared_params, arrays[:len(declared_params)]):
            model.params[name] = Tensor(arr, requires_grad=True)
        for (name, _), arr in zip(declared_stats, arrays[len(declared_params):]):
            model.bn_stats[name] = arr.copy()
        return model


def build_model(config: ModelConfig) -> Model:
    return Model(config)
