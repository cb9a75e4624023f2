"""Minimal dense-tensor CNN used as the digital half of the pipeline.

Architecture: four 3x3 "same" convolutions with six channels each, 2x2 max
pooling after the second and fourth, then fully connected layers of 64 and 2
units; ReLU everywhere except the final softmax.  Gradients are hand-derived
per layer and the input gradient is exposed so the physical layer can be
trained through the network.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import DimensionError, NumericError, ValidationError

CHECKPOINT_VERSION = 1


class Tensor:
    """Dense real array with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray):
        self.data = data
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0)

    def accumulate(self, g: np.ndarray):
        if g.shape != self.data.shape:
            raise DimensionError(f"grad shape {g.shape} != param shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g


def softmax(logits: np.ndarray) -> np.ndarray:
    """Rowwise softmax evaluated in float64 so probabilities sum to 1 to ~1e-16."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class _Standardize:
    """Per-image zero-mean unit-variance normalization, differentiable."""

    EPS = 1e-8

    def forward(self, x):
        # x: (B, H, W)
        mu = x.mean(axis=(1, 2), keepdims=True)
        var = x.var(axis=(1, 2), keepdims=True)
        inv = 1.0 / np.sqrt(var + self.EPS)
        y = (x - mu) * inv
        self._y, self._inv = y, inv
        return y

    def backward(self, g):
        y, inv = self._y, self._inv
        gm = g.mean(axis=(1, 2), keepdims=True)
        gym = (g * y).mean(axis=(1, 2), keepdims=True)
        return inv * (g - gm - y * gym)


class _Conv3x3:
    """3x3 stride-1 zero-padded convolution via im2col and one GEMM."""

    def __init__(self, name, in_ch, out_ch, rng, dtype):
        fan_in = in_ch * 9
        bound = np.sqrt(6.0 / fan_in)
        self.w = Tensor(rng.uniform(-bound, bound, size=(out_ch, in_ch, 3, 3)).astype(dtype))
        self.b = Tensor(np.zeros(out_ch, dtype=dtype))
        self.name = name
        self.in_ch, self.out_ch = in_ch, out_ch

    def params(self):
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}

    @staticmethod
    def _cols(x):
        # x: (B, C, H, W) -> (B*H*W, C*9) patch matrix
        B, C, H, W = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        s = xp.strides
        view = as_strided(
            xp,
            shape=(B, C, H, W, 3, 3),
            strides=(s[0], s[1], s[2], s[3], s[2], s[3]),
            writeable=False,
        )
        return np.ascontiguousarray(view.transpose(0, 2, 3, 1, 4, 5)).reshape(B * H * W, C * 9)

    def forward(self, x):
        B, C, H, W = x.shape
        cols = self._cols(x)
        out = cols @ self.w.data.reshape(self.out_ch, -1).T + self.b.data
        self._cols_cache, self._in_shape = cols, x.shape
        return out.reshape(B, H, W, self.out_ch).transpose(0, 3, 1, 2)

    def backward(self, g):
        B, C, H, W = self._in_shape
        gf = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * H * W, self.out_ch)
        self.w.accumulate((gf.T @ self._cols_cache).reshape(self.w.data.shape))
        self.b.accumulate(gf.sum(axis=0))
        # input grad = "same" correlation of g with spatially flipped kernels
        wback = self.w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # (C, O, 3, 3)
        gcols = self._cols(g.reshape(B, self.out_ch, H, W))
        dx = gcols @ wback.reshape(C, -1).T
        return dx.reshape(B, H, W, C).transpose(0, 3, 1, 2)


class _ReLU:
    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, g):
        return g * self._mask


class _MaxPool2:
    """2x2 stride-2 max pooling; gradient routed to the first argmax in
    row-major block order on ties."""

    def forward(self, x):
        B, C, H, W = x.shape
        blocks = x.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        flat = np.ascontiguousarray(blocks).reshape(B, C, H // 2, W // 2, 4)
        self._arg = flat.argmax(axis=-1)
        self._in_shape = x.shape
        return flat.max(axis=-1)

    def backward(self, g):
        B, C, H, W = self._in_shape
        onehot = self._arg[..., None] == np.arange(4)
        dx = onehot * g[..., None]
        dx = dx.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return dx.reshape(B, C, H, W)


class _Flatten:
    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g):
        return g.reshape(self._shape)


class _Linear:
    def __init__(self, name, n_in, n_out, rng, dtype):
        bound = np.sqrt(6.0 / n_in)
        self.w = Tensor(rng.uniform(-bound, bound, size=(n_in, n_out)).astype(dtype))
        self.b = Tensor(np.zeros(n_out, dtype=dtype))
        self.name = name

    def params(self):
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}

    def forward(self, x):
        self._x = x
        return x @ self.w.data + self.b.data

    def backward(self, g):
        self.w.accumulate(self._x.T @ g)
        self.b.accumulate(g.sum(axis=0))
        return g @ self.w.data.T


class DigitalModel:
    """The digital layers; input is a raw sensor image, output 2 class probs."""

    N_CHANNELS = 6

    def __init__(self, sensor_n: int, rng: np.random.Generator, dtype=np.float32):
        if sensor_n % 4 != 0:
            raise ValidationError(f"sensor_n must be divisible by 4, got {sensor_n}")
        self.sensor_n = sensor_n
        self.dtype = np.dtype(dtype)
        c = self.N_CHANNELS
        self.standardize = _Standardize()
        self.conv1 = _Conv3x3("conv1", 1, c, rng, dtype)
        self.conv2 = _Conv3x3("conv2", c, c, rng, dtype)
        self.conv3 = _Conv3x3("conv3", c, c, rng, dtype)
        self.conv4 = _Conv3x3("conv4", c, c, rng, dtype)
        self.pool1 = _MaxPool2()
        self.pool2 = _MaxPool2()
        self.relu = [_ReLU() for _ in range(5)]
        n_flat = (sensor_n // 4) ** 2 * c
        self.fc1 = _Linear("fc1", n_flat, 64, rng, dtype)
        self.fc2 = _Linear("fc2", 64, 2, rng, dtype)

    # -- parameter plumbing ----------------------------------------------

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for layer in (self.conv1, self.conv2, self.conv3, self.conv4, self.fc1, self.fc2):
            out.update(layer.params())
        return out

    def zero_grad(self):
        for t in self.params().values():
            t.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        params = self.params()
        if set(arrays) != set(params):
            raise ValidationError("parameter name mismatch in state")
        for k, t in params.items():
            if arrays[k].shape != t.data.shape:
                raise DimensionError(f"{k}: shape {arrays[k].shape} != {t.data.shape}")
            t.data = arrays[k].astype(self.dtype, copy=True)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_arrays().items()}

    # -- forward / backward ------------------------------------------------

    def _check_batch(self, x):
        if x.ndim != 3 or x.shape[1] != self.sensor_n or x.shape[2] != self.sensor_n:
            raise DimensionError(
                f"expected (B, {self.sensor_n}, {self.sensor_n}) images, got {x.shape}"
            )

    def logits_batch(self, images: np.ndarray) -> np.ndarray:
        x = np.asarray(images, dtype=self.dtype)
        self._check_batch(x)
        x = self.standardize.forward(x)[:, None]  # (B, 1, H, W)
        x = self.relu[0].forward(self.conv1.forward(x))
        x = self.relu[1].forward(self.conv2.forward(x))
        x = self.pool1.forward(x)
        x = self.relu[2].forward(self.conv3.forward(x))
        x = self.relu[3].forward(self.conv4.forward(x))
        x = self.pool2.forward(x)
        x = self.flatten_forward(x)
        x = self.relu[4].forward(self.fc1.forward(x))
        return self.fc2.forward(x)

    def flatten_forward(self, x):
        self._flat_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def forward_batch(self, images: np.ndarray) -> np.ndarray:
        return softmax(self.logits_batch(images))

    def input_grad_batch(self, dlogits: np.ndarray) -> np.ndarray:
        """Backpropagate d(loss)/d(logits) to d(loss)/d(raw input images)."""
        g = dlogits.astype(self.dtype)
        g = self.fc1.backward(self.relu[4].backward(self.fc2.backward(g)))
        g = g.reshape(self._flat_shape)
        g = self.pool2.backward(g)
        g = self.conv4.backward(self.relu[3].backward(g))
        g = self.conv3.backward(self.relu[2].backward(g))
        g = self.pool1.backward(g)
        g = self.conv2.backward(self.relu[1].backward(g))
        g = self.conv1.backward(self.relu[0].backward(g))
        return self.standardize.backward(g[:, 0])

    def backward_batch(self, images: np.ndarray, labels: np.ndarray):
        """Mean cross-entropy over the batch.

        Accumulates parameter gradients and returns (loss, input_grad) with
        input_grad per image already scaled by 1/batch.
        """
        labels = np.asarray(labels)
        probs = self.forward_batch(images)
        if not np.all(np.isfinite(probs)):
            raise NumericError("non-finite activations at the softmax layer")
        B = probs.shape[0]
        picked = probs[np.arange(B), labels]
        loss = float(-np.log(np.maximum(picked, 1e-300)).mean())
        dlogits = probs.copy()
        dlogits[np.arange(B), labels] -= 1.0
        dlogits /= B
        return loss, self.input_grad_batch(dlogits)


def forward(model: DigitalModel, image: np.ndarray) -> np.ndarray:
    """Class probabilities for a single sensor image."""
    if image.ndim != 2:
        raise DimensionError(f"expected a 2D image, got shape {image.shape}")
    return model.forward_batch(image[None])[0]


def backward(model: DigitalModel, image: np.ndarray, label: int):
    """Single-sample loss -log p[label] plus d(loss)/d(image)."""
    if label not in (0, 1):
        raise ValidationError(f"label must be 0 or 1, got {label}")
    loss, ig = model.backward_batch(image[None], np.array([label]))
    return loss, ig[0]


def init_params(seed: int, sensor_n: int = 64, dtype=np.float32) -> DigitalModel:
    """He-uniform fan-in initialization, reproducible per seed."""
    return DigitalModel(sensor_n, np.random.default_rng(seed), dtype=dtype)


# -- optimizer -----------------------------------------------------------------


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> AdamState:
    """One in-place Adam update with bias correction."""
    if lr <= 0:
        raise ValidationError(f"lr must be positive, got {lr}")
    if len(params) != len(grads):
        raise DimensionError("params and grads length mismatch")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise DimensionError(f"param {p.shape} vs grad {g.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class Adam:
    """Adam over a dict of named tensors; consumes .grad buffers."""

    def __init__(self, tensors: dict[str, Tensor], lr: float, betas=(0.9, 0.999), eps=1e-8):
        self.tensors = dict(tensors)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self):
        names = list(self.tensors)
        params = [self.tensors[n].data for n in names]
        grads = []
        for n in names:
            g = self.tensors[n].grad
            if g is None:
                g = np.zeros_like(self.tensors[n].data)
            grads.append(g)
        adam_step(params, grads, self.state, self.lr, self.betas, self.eps)


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(model: DigitalModel, directory: str | Path, extra: dict | None = None):
    """Write a manifest plus one raw float32 little-endian blob per parameter."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "sensor_n": model.sensor_n,
        "dtype": model.dtype.name,
        "params": {},
    }
    if extra:
        manifest.update(extra)
    for name, tensor in model.params().items():
        fname = name.replace("/", "_") + ".f32"
        (directory / fname).write_bytes(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())
        manifest["params"][name] = {"file": fname, "shape": list(tensor.data.shape)}
    (directory / "checkpoint.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_checkpoint(directory: str | Path) -> DigitalModel:
    directory = Path(directory)
    manifest = json.loads((directory / "checkpoint.json").read_text())
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {manifest.get('version')!r}")
    model = init_params(0, sensor_n=manifest["sensor_n"], dtype=np.dtype(manifest["dtype"]))
    arrays = {}
    for name, meta in manifest["params"].items():
        raw = np.frombuffer((directory / meta["file"]).read_bytes(), dtype="<f4")
        expected = int(np.prod(meta["shape"]))
        if raw.size != expected:
            raise ValidationError(f"blob {meta['file']} has {raw.size} values, expected {expected}")
        arrays[name] = raw.reshape(meta["shape"])
    model.load_state_arrays(arrays)
    return model
