"""ViPFormer: one pre-LN Transformer encoder shared by an image and a point branch.

Layout of a forward pass for either modality::

    tokens -> input adapter + position embedding -> encoder (shared)
           -> [max ; mean] pooling -> output adapter (shared) -> feature

The image adapter is a single linear map with a learned per-patch position
table. The point adapter is a two-layer perceptron over flattened neighbour
patches, and point positions are encoded from the center coordinates with a
second small perceptron.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ContractError, ParameterError, ShapeError
from .rng import RngStream
from .tensor import Tensor
from .tokenize import ImagePatchSequence, PointPatchSequence, build_point_patches_batch, patchify_images


@dataclass
class ViPFormerConfig:
    depth: int = 9
    heads: int = 6
    dim: int = 384
    mlp_ratio: float = 4
    length: int = 128
    k: int = 32
    patch: int = 12
    image_height: int = 144
    image_width: int = 144
    image_channels: int = 3
    point_channels: int = 3
    point_hidden: int = 128
    dropout: float = 0.1
    out_dim: int | None = None
    dtype: str = "float32"

    def __post_init__(self):
        if self.out_dim is None:
            self.out_dim = self.dim
        self.validate()

    def validate(self):
        if self.heads < 1 or self.dim % self.heads:
            raise ParameterError(f"dim={self.dim} is not divisible by heads={self.heads}")
        if self.patch < 1 or self.image_height % self.patch or self.image_width % self.patch:
            raise ParameterError(f"patch={self.patch} must divide {self.image_height}x{self.image_width}")
        if self.depth < 0 or self.mlp_ratio < 1 or self.length < 1 or self.k < 1:
            raise ParameterError("need depth >= 0, mlp_ratio >= 1, length >= 1, k >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.dtype not in ("float32", "float64"):
            raise ParameterError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def num_image_patches(self) -> int:
        return (self.image_height // self.patch) * (self.image_width // self.patch)

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.mlp_ratio * self.dim))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ViPFormerConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# -- module plumbing ---------------------------------------------------------

def Parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def trunc_normal(rng: RngStream, shape, std=0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, value: np.ndarray):
        self._buffers[name] = name
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix="") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix="") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, m in self._modules.items():
            yield from m.named_buffers(f"{prefix}{name}.")

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class ModuleList(Module):
    def __init__(self, items):
        super().__init__()
        self._items = list(items)
        for i, m in enumerate(self._items):
            self._modules[str(i)] = m

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Linear(Module):
    def __init__(self, n_in, n_out, rng: RngStream, dtype=np.float32):
        super().__init__()
        self.weight = Parameter(trunc_normal(rng, (n_in, n_out), dtype=dtype))
        self.bias = Parameter(np.zeros(n_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d, dtype=np.float32, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.weight = Parameter(np.ones(d, dtype=dtype))
        self.bias = Parameter(np.zeros(d, dtype=dtype))

    def __call__(self, x):
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class BatchNorm1d(Module):
    def __init__(self, d, dtype=np.float32, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.weight = Parameter(np.ones(d, dtype=dtype))
        self.bias = Parameter(np.zeros(d, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(d, dtype=dtype))
        self.register_buffer("running_var", np.ones(d, dtype=dtype))
        self.register_buffer("num_batches_tracked", np.zeros((), dtype=np.int64))

    def __call__(self, x, train: bool):
        if not train and int(self.num_batches_tracked) == 0:
            raise ContractError(
                "BatchNorm has no running statistics yet; run a training step or "
                "calibrate_batchnorm() before evaluating")
        if train:
            self.num_batches_tracked += 1
        return T.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                            train, self.momentum, self.eps)


class Perceptron(Module):
    """Two-layer perceptron with a GELU between the layers."""

    def __init__(self, n_in, n_hidden, n_out, rng, dtype=np.float32):
        super().__init__()
        self.fc1 = Linear(n_in, n_hidden, rng.substream("fc1"), dtype)
        self.fc2 = Linear(n_hidden, n_out, rng.substream("fc2"), dtype)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class MultiHeadSelfAttention(Module):
    def __init__(self, dim, heads, rng, dtype=np.float32):
        super().__init__()
        self.dim, self.heads = dim, heads
        self.qkv = Linear(dim, 3 * dim, rng.substream("qkv"), dtype)
        self.proj = Linear(dim, dim, rng.substream("proj"), dtype)
        self.keep_attention = False
        self.last_attention = None

    def __call__(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        h, dh = self.heads, d // self.heads
        w, bias = self.qkv.weight, self.qkv.bias
        # one QKV map, applied as three column blocks to avoid splitting a big activation
        q, k, v = (T.linear(x, w[:, i * d:(i + 1) * d], bias[i * d:(i + 1) * d]) for i in range(3))

        def heads_first(z):
            return z.reshape(b, t, h, dh).transpose(0, 2, 1, 3)

        q = heads_first(q) * (1.0 / np.sqrt(dh))
        scores = T.matmul(q, heads_first(k).T)
        att = T.softmax_lastdim(scores)
        if self.keep_attention:
            self.last_attention = att.data
        out = T.matmul(att, heads_first(v)).transpose(0, 2, 1, 3).reshape(b, t, d)
        return self.proj(out)


class EncoderBlock(Module):
    def __init__(self, cfg: ViPFormerConfig, rng, dtype=np.float32):
        super().__init__()
        self.rate = cfg.dropout
        self.norm1 = LayerNorm(cfg.dim, dtype)
        self.attn = MultiHeadSelfAttention(cfg.dim, cfg.heads, rng.substream("attn"), dtype)
        self.norm2 = LayerNorm(cfg.dim, dtype)
        self.mlp = Perceptron(cfg.dim, cfg.mlp_hidden, cfg.dim, rng.substream("mlp"), dtype)

    def __call__(self, z, train=False, rng=None):
        a = T.dropout(self.attn(self.norm1(z)), self.rate, _sub(rng, "attn"), train)
        z = a + z
        m = T.dropout(self.mlp(self.norm2(z)), self.rate, _sub(rng, "mlp"), train)
        return m + z


def _sub(rng, *parts):
    return None if rng is None else rng.substream(*parts)


class Encoder(Module):
    def __init__(self, cfg, rng, dtype=np.float32):
        super().__init__()
        self.blocks = ModuleList(EncoderBlock(cfg, rng.substream("block", i), dtype)
                                 for i in range(cfg.depth))

    def __call__(self, z, train=False, rng=None):
        for i, block in enumerate(self.blocks):
            z = block(z, train, _sub(rng, "block", i))
        return z


class OutputAdapter(Module):
    def __init__(self, dim, out_dim, rng, dtype=np.float32):
        super().__init__()
        self.norm1 = BatchNorm1d(2 * dim, dtype)
        self.fc1 = Linear(2 * dim, dim, rng.substream("fc1"), dtype)
        self.norm2 = BatchNorm1d(dim, dtype)
        self.fc2 = Linear(dim, out_dim, rng.substream("fc2"), dtype)

    @property
    def widths(self):
        return (self.fc1.weight.shape[0], self.fc1.weight.shape[1], self.fc2.weight.shape[1])

    def __call__(self, r, train: bool):
        h = self.fc1(T.relu(self.norm1(r, train)))
        return self.fc2(T.relu(self.norm2(h, train)))


class ClassifierHead(Module):
    def __init__(self, dim, num_classes, rate, rng, dtype=np.float32):
        super().__init__()
        self.rate = rate
        self.num_classes = num_classes
        self.fc1 = Linear(2 * dim, dim, rng.substream("fc1"), dtype)
        self.fc2 = Linear(dim, num_classes, rng.substream("fc2"), dtype)

    def __call__(self, r, train=False, rng=None):
        h = T.dropout(T.relu(self.fc1(r)), self.rate, rng, train)
        return self.fc2(h)


def pool(z: Tensor) -> Tensor:
    """Object-level feature: per-dimension max and mean over tokens, concatenated."""
    if z.ndim < 2 or z.shape[-2] == 0:
        raise ShapeError(f"pool needs at least one token, got shape {z.shape}")
    # average offsets from the first token so a constant sequence pools to itself bit for bit
    ref = Tensor(z.data[..., :1, :])
    mean = (z - ref).mean(axis=-2) + Tensor(z.data[..., 0, :])
    return T.concat([z.max(axis=-2), mean], axis=-1)


class ViPFormer(Module):
    def __init__(self, cfg: ViPFormerConfig, rng: RngStream | int = 0):
        super().__init__()
        if not isinstance(rng, RngStream):
            rng = RngStream(int(rng))
        rng = rng.substream("init")
        self.config = cfg
        dt = np.dtype(cfg.dtype)
        self.dtype = dt
        d = cfg.dim
        self.image_adapter = Linear(cfg.patch ** 2 * cfg.image_channels, d, rng.substream("image_adapter"), dt)
        self.image_pos = Parameter(trunc_normal(rng.substream("image_pos"), (cfg.num_image_patches, d), dtype=dt))
        self.point_adapter = Perceptron(cfg.k * cfg.point_channels, cfg.point_hidden, d,
                                        rng.substream("point_adapter"), dt)
        self.point_pos = Perceptron(cfg.point_channels, cfg.point_hidden, d, rng.substream("point_pos"), dt)
        self.encoder = Encoder(cfg, rng.substream("encoder"), dt)
        self.output_adapter = OutputAdapter(d, cfg.out_dim, rng.substream("output_adapter"), dt)
        self.head = None
        self._head_rng = rng.substream("head")

    # -- heads ----------------------------------------------------------
    def attach_head(self, num_classes: int):
        self.head = ClassifierHead(self.config.dim, num_classes, self.config.dropout,
                                   self._head_rng, self.dtype)
        return self.head

    def named_parameters(self, prefix="", include_head=True):
        for name, p in super().named_parameters(prefix):
            if include_head or not name.startswith(prefix + "head."):
                yield name, p

    # -- input adapters -------------------------------------------------
    def embed_image(self, patches) -> Tensor:
        if isinstance(patches, ImagePatchSequence):
            patches = patches.patches
        x = Tensor(np.asarray(patches, dtype=self.dtype))
        single = x.ndim == 2
        if single:
            x = x.reshape(1, *x.shape)
        m, p = x.shape[1], x.shape[2]
        if (m, p) != (self.config.num_image_patches, self.image_adapter.weight.shape[0]):
            raise ShapeError(f"image patches {x.shape[1:]} do not match config "
                             f"({self.config.num_image_patches}, {self.image_adapter.weight.shape[0]})")
        z = self.image_adapter(x) + self.image_pos
        return z[0] if single else z

    def embed_points(self, patches, centers=None) -> Tensor:
        if isinstance(patches, PointPatchSequence):
            patches, centers = patches.patches, patches.centers
        x = Tensor(np.asarray(patches, dtype=self.dtype))
        c = Tensor(np.asarray(centers, dtype=self.dtype))
        single = x.ndim == 2
        if single:
            x, c = x.reshape(1, *x.shape), c.reshape(1, *c.shape)
        if x.shape[-1] != self.point_adapter.fc1.weight.shape[0] or c.shape[:-1] != x.shape[:-1] \
                or c.shape[-1] != self.config.point_channels:
            raise ShapeError(f"point patches {x.shape} / centers {c.shape} do not match config")
        z = self.point_adapter(x) + self.point_pos(c)
        return z[0] if single else z

    # -- shared trunk ---------------------------------------------------
    def encode(self, z: Tensor, train=False, rng=None) -> Tensor:
        if z.shape[-1] != self.config.dim:
            raise ShapeError(f"encoder width {self.config.dim} does not match input {z.shape}")
        single = z.ndim == 2
        if single:
            z = z.reshape(1, *z.shape)
        out = self.encoder(z, train, rng)
        return out[0] if single else out

    def adapt(self, r: Tensor, train=False) -> Tensor:
        return self.output_adapter(r, train)

    # -- tokenization helpers -------------------------------------------
    def tokenize_points(self, clouds, rng: RngStream, workers=1):
        rngs = [rng.substream("fps", i) for i in range(len(clouds))]
        return build_point_patches_batch(clouds, self.config.length, self.config.k, rngs, workers)

    def tokenize_images(self, images):
        return patchify_images(np.asarray(images), self.config.patch)

    # -- full branches ----------------------------------------------------
    def point_features(self, patches, centers, train=False, rng=None) -> Tensor:
        """Pooled encoder feature ``[B, 2D]`` for tokenized point clouds."""
        return pool(self.encode(self.embed_points(patches, centers), train, _sub(rng, "encoder")))

    def image_features(self, patches, train=False, rng=None) -> Tensor:
        return pool(self.encode(self.embed_image(patches), train, _sub(rng, "encoder")))

    def forward_points(self, clouds, rng: RngStream, train=False, workers=1) -> Tensor:
        patches, centers = self.tokenize_points(clouds, rng, workers)
        return self.adapt(self.point_features(patches, centers, train, rng), train)

    def forward_image(self, images, train=False, rng=None) -> Tensor:
        return self.adapt(self.image_features(self.tokenize_images(images), train, rng), train)

    def classify(self, patches, centers, train=False, rng=None) -> Tensor:
        if self.head is None:
            raise ContractError("no classifier head attached; call attach_head(num_classes) first")
        r = self.point_features(patches, centers, train, rng)
        return self.head(r, train, _sub(rng, "head"))

    def classify_forward(self, clouds, rng: RngStream, train=False, workers=1) -> Tensor:
        patches, centers = self.tokenize_points(clouds, rng, workers)
        return self.classify(patches, centers, train, rng)

    def state_arrays(self, include_head=True) -> dict:
        """Every parameter and buffer as a name -> ndarray mapping (no copies)."""
        out = {f"param/{n}": p.data for n, p in self.named_parameters(include_head=include_head)}
        out.update({f"buffer/{n}": b for n, b in self.named_buffers()
                    if include_head or not n.startswith("head.")})
        return out

    def load_arrays(self, arrays: dict, strict=True, include_head=True):
        params = dict(self.named_parameters(include_head=include_head))
        buffers = {n: m for n, m in self._buffer_owners()}
        for key, arr in arrays.items():
            kind, name = key.split("/", 1)
            if kind == "param" and name in params:
                if params[name].shape != arr.shape:
                    raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {params[name].shape}")
                params[name].data = np.array(arr, dtype=params[name].dtype)
            elif kind == "buffer" and name in buffers:
                owner, attr = buffers[name]
                cur = getattr(owner, attr)
                cur[...] = arr
            elif strict:
                raise ContractError(f"unexpected checkpoint entry {key}")

    def _buffer_owners(self):
        def walk(mod, prefix):
            for name in mod._buffers:
                yield prefix + name, (mod, name)
            for name, sub in mod._modules.items():
                yield from walk(sub, f"{prefix}{name}.")
        return walk(self, "")


def calibrate_batchnorm(model: ViPFormer, point_batches=(), image_batches=(), rng=None):
    """Populate output-adapter BN running statistics from forward passes.

    The encoder runs without dropout and no graph is recorded; only the
    output adapter sees batch statistics. Use this to make a freshly
    initialised model evaluable.
    """
    rng = rng if rng is not None else RngStream(0).substream("calibrate")
    with T.no_grad():
        for i, clouds in enumerate(point_batches):
            patches, centers = model.tokenize_points(clouds, rng.substream("points", i))
            model.adapt(model.point_features(patches, centers), train=True)
        for images in image_batches:
            model.adapt(model.image_features(model.tokenize_images(images)), train=True)


def count_parameters(cfg: ViPFormerConfig) -> int:
    """Closed-form number of learnable scalars in the pretraining model."""
    d, dh, out = cfg.dim, cfg.point_hidden, cfg.out_dim
    hidden = cfg.mlp_hidden
    image = cfg.patch ** 2 * cfg.image_channels * d + d + cfg.num_image_patches * d
    points = (cfg.k * cfg.point_channels * dh + dh + dh * d + d) + (cfg.point_channels * dh + dh + dh * d + d)
    block = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * hidden + hidden) + (hidden * d + d)
    adapter = 2 * (2 * d) + (2 * d * d + d) + 2 * d + (d * out + out)
    return image + points + cfg.depth * block + adapter


def enumerate_parameters(model: ViPFormer) -> int:
    return int(sum(p.size for _, p in model.named_parameters(include_head=False)))
