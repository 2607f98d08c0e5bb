"""Declarative architectures, the MNIST reference zoo, and checkpoints."""

import hashlib
import re
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, no_grad, ops
from .autodiff.tensor import ShapeError

LAYER_KINDS = ("conv", "dense", "relu", "dropout", "flatten", "softmax")
DEFAULT_DROPOUT = 0.5

CHECKPOINT_MAGIC = "AT2L-CHECKPOINT 1"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0
    kh: int = 0
    kw: int = 0
    units: int = 0
    rate: float = 0.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv" and min(self.filters, self.kh, self.kw) <= 0:
            raise ValueError(f"conv needs positive (filters, kh, kw), got {self}")
        if self.kind == "dense" and self.units <= 0:
            raise ValueError(f"dense needs positive units, got {self}")
        if self.kind == "dropout" and not 0.0 < self.rate < 1.0:
            raise ValueError(f"dropout rate must be in (0, 1), got {self.rate}")

    def __str__(self):
        if self.kind == "conv":
            return f"conv({self.filters},{self.kh},{self.kw})"
        if self.kind == "dense":
            return f"dense({self.units})"
        if self.kind == "dropout":
            return f"dropout({self.rate!r})"
        return self.kind


def conv(filters, kh, kw):
    return LayerSpec("conv", filters=filters, kh=kh, kw=kw)


def dense(units):
    return LayerSpec("dense", units=units)


def dropout(rate=DEFAULT_DROPOUT):
    return LayerSpec("dropout", rate=rate)


RELU = LayerSpec("relu")
FLATTEN = LayerSpec("flatten")
SOFTMAX = LayerSpec("softmax")

_LAYER_RE = re.compile(r"^\s*([a-z]+)\s*(?:\(([^)]*)\))?\s*$")


def parse_layer(text):
    m = _LAYER_RE.match(text)
    if not m:
        raise ValueError(f"cannot parse layer {text!r}")
    kind, args = m.group(1), m.group(2)
    nums = [a.strip() for a in args.split(",")] if args else []
    if kind == "conv":
        return conv(*(int(v) for v in nums))
    if kind == "dense":
        return dense(int(nums[0]))
    if kind == "dropout":
        return dropout(float(nums[0])) if nums else dropout()
    if nums:
        raise ValueError(f"layer {kind!r} takes no arguments")
    return LayerSpec(kind)


@dataclass(frozen=True)
class ModelSpec:
    name: str
    layers: tuple
    input_shape: tuple = (28, 28, 1)
    num_classes: int = 10

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        if len(self.layers) < 2 or self.layers[-1].kind != "softmax" or self.layers[-2].kind != "dense":
            raise ValueError(f"model {self.name}: must end with dense({self.num_classes}) then softmax")
        if self.layers[-2].units != self.num_classes:
            raise ValueError(
                f"model {self.name}: final dense has {self.layers[-2].units} units, "
                f"expected {self.num_classes} classes"
            )
        self.shapes()

    def shapes(self):
        """Per-layer output shapes (without batch axis).

        A dense layer on a rank>1 input flattens it first.
        """
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv":
                if len(shape) != 3:
                    raise ShapeError(f"model {self.name}: layer {i} ({layer}) needs HWC input, got {shape}")
                h, w, _ = shape
                if layer.kh > h or layer.kw > w:
                    raise ShapeError(f"model {self.name}: layer {i} ({layer}) kernel larger than input {shape}")
                shape = (h - layer.kh + 1, w - layer.kw + 1, layer.filters)
            elif layer.kind == "dense":
                shape = (layer.units,)
            elif layer.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif layer.kind == "softmax" and i != len(self.layers) - 1:
                raise ShapeError(f"model {self.name}: layer {i} softmax must be last")
            out.append(shape)
        return out

    def layer_string(self):
        return " ".join(str(layer) for layer in self.layers)

    def serialize(self):
        shape = ",".join(str(s) for s in self.input_shape)
        return f"name={self.name}; input_shape={shape}; num_classes={self.num_classes}; layers={self.layer_string()}"

    @classmethod
    def parse(cls, text):
        fields = dict(part.strip().split("=", 1) for part in text.split(";") if part.strip())
        return cls(
            name=fields["name"],
            layers=tuple(parse_layer(t) for t in fields["layers"].split()),
            input_shape=tuple(int(s) for s in fields.get("input_shape", "28,28,1").split(",")),
            num_classes=int(fields.get("num_classes", 10)),
        )


def _fans(spec):
    """(layer index, weight shape, fan_in, fan_out) for each parametrized layer."""
    shapes = spec.shapes()
    prev = spec.input_shape
    out = []
    for i, layer in enumerate(spec.layers):
        if layer.kind == "conv":
            cin = prev[2]
            receptive = layer.kh * layer.kw
            out.append((i, (layer.kh, layer.kw, cin, layer.filters), receptive * cin, receptive * layer.filters))
        elif layer.kind == "dense":
            fan_in = int(np.prod(prev))
            out.append((i, (fan_in, layer.units), fan_in, layer.units))
        prev = shapes[i]
    return out


@dataclass
class Model:
    spec: ModelSpec
    params: dict = field(default_factory=dict)
    seed: int = 0
    meta: dict = field(default_factory=dict)  # extra checkpoint header lines, kept for re-saving

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    @property
    def name(self):
        return self.spec.name

    def forward(self, x, train=False, rng=None):
        """Logits (the embedding f(x)); the trailing softmax is not applied."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        elif x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype), requires_grad=False) if not x.requires_grad else x
        want = self.spec.input_shape
        if x.shape[1:] != want:
            raise ShapeError(f"model {self.name}: input shape {x.shape[1:]} does not match {want}")
        h = x
        for i, layer in enumerate(self.spec.layers):
            if layer.kind == "conv":
                h = ops.conv2d(h, self.params[f"{i}.w"], self.params[f"{i}.b"])
            elif layer.kind == "dense":
                if h.ndim > 2:
                    h = ops.flatten(h)
                h = ops.add(ops.matmul(h, self.params[f"{i}.w"]), self.params[f"{i}.b"])
            elif layer.kind == "relu":
                h = ops.relu(h)
            elif layer.kind == "dropout":
                h = ops.dropout(h, layer.rate, train, rng)
            elif layer.kind == "flatten":
                h = ops.flatten(h)
        return h

    def param_list(self):
        return [self.params[k] for k in sorted(self.params, key=_param_key)]

    def copy(self):
        return Model(self.spec, {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}, self.seed)

    def frozen(self):
        """A view sharing this model's arrays with gradients switched off,
        so input-gradient passes skip the weight gradients."""
        return Model(self.spec, {k: Tensor(v.data) for k, v in self.params.items()}, self.seed)

    def param_hash(self):
        h = hashlib.sha256()
        for name in sorted(self.params, key=_param_key):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data, dtype=np.float64).tobytes())
        return h.hexdigest()[:16]


def _param_key(name):
    idx, kind = name.split(".")
    return int(idx), kind


def build_model(spec, seed, dtype=np.float64):
    """Glorot-uniform weights, zero biases, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    params = {}
    for i, wshape, fan_in, fan_out in _fans(spec):
        s = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"{i}.w"] = Tensor(rng.uniform(-s, s, size=wshape).astype(dtype), requires_grad=True)
        params[f"{i}.b"] = Tensor(np.zeros(wshape[-1], dtype=dtype), requires_grad=True)
    return Model(spec, params, seed)


def predict(model, x, train_mode=False, rng=None):
    """(probs, embedding) tensors. A single unbatched example is promoted."""
    if not isinstance(x, Tensor):
        x = np.asarray(x)
        if x.shape == model.spec.input_shape:
            x = x[None]
    elif x.shape == model.spec.input_shape:
        x = ops.reshape(x, (1,) + x.shape)
    logits = model.forward(x, train=train_mode, rng=rng)
    return ops.softmax(logits), logits


def logits_of(model, x, batch_size=256):
    """Eval-mode logits as a numpy array, computed without recording."""
    out = []
    with no_grad():
        for start in range(0, len(x), batch_size):
            out.append(model.forward(x[start:start + batch_size]).data)
    return np.concatenate(out) if out else np.zeros((0, model.spec.num_classes))


def predict_labels(model, x, batch_size=256):
    return logits_of(model, x, batch_size).argmax(axis=1)


def reference_zoo():
    """Models A-D for 28x28x1 MNIST input."""
    return [
        ModelSpec("A", (conv(64, 5, 5), RELU, conv(64, 5, 5), RELU, dropout(),
                        dense(128), RELU, dropout(), dense(10), SOFTMAX)),
        ModelSpec("B", (conv(64, 8, 8), RELU, conv(128, 6, 6), RELU, conv(128, 5, 5), RELU,
                        dropout(), FLATTEN, dense(10), SOFTMAX)),
        ModelSpec("C", (conv(128, 3, 3), RELU, conv(64, 3, 3), RELU, dropout(), FLATTEN,
                        dense(128), RELU, dropout(), dense(10), SOFTMAX)),
        ModelSpec("D", (dense(300), RELU, dropout(), dense(300), RELU, dropout(),
                        dense(300), RELU, dropout(), dense(10), SOFTMAX)),
    ]


def zoo_spec(name):
    for spec in reference_zoo():
        if spec.name == name:
            return spec
    raise KeyError(f"no reference model named {name!r}")


def mlp_spec(name, hidden, input_shape=(2,), num_classes=2):
    """Small ReLU MLP, used on the synthetic 2-D problems."""
    layers = []
    for units in hidden:
        layers += [dense(units), RELU]
    return ModelSpec(name, tuple(layers) + (dense(num_classes), SOFTMAX), input_shape, num_classes)


# -- flat binary arrays with a text header (checkpoints, adversarial batches)

def write_arrays(path, arrays, meta=None):
    """Text header (names, shapes, meta) then little-endian float64 payload."""
    lines = [CHECKPOINT_MAGIC]
    for key, value in (meta or {}).items():
        lines.append(f"# {key}: {value}")
    for name, arr in arrays.items():
        lines.append(f"{name} {' '.join(str(d) for d in np.shape(arr)) or '-'}")
    lines.append("END")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode())
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_arrays(path):
    """Inverse of :func:`write_arrays`: (ordered dict of arrays, meta dict)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.find(b"\nEND\n")
    if not raw.startswith(CHECKPOINT_MAGIC.encode()) or end < 0:
        raise ValueError(f"{path}: not an at2l array file")
    header = raw[:end].decode().split("\n")[1:]
    meta, entries = {}, []
    for line in header:
        if line.startswith("# "):
            key, value = line[2:].split(": ", 1)
            meta[key] = value
        else:
            name, *dims = line.split(" ")
            shape = () if dims == ["-"] else tuple(int(d) for d in dims)
            entries.append((name, shape))
    offset = end + len(b"\nEND\n")
    arrays = {}
    for name, shape in entries:
        count = int(np.prod(shape))
        if offset + 8 * count > len(raw):
            raise ValueError(f"{path}: array {name} truncated at byte offset {len(raw)}")
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += 8 * count
    if offset != len(raw):
        raise ValueError(f"{path}: payload size mismatch at byte offset {offset}")
    return arrays, meta


def save_checkpoint(model, path, extra_meta=None):
    meta = {"spec": model.spec.serialize(), "seed": model.seed, "dtype": model.dtype.name}
    meta.update(model.meta)
    meta.update(extra_meta or {})
    names = sorted(model.params, key=_param_key)
    write_arrays(path, {n: model.params[n].data for n in names}, meta)


def load_checkpoint(path):
    arrays, meta = read_arrays(path)
    spec = ModelSpec.parse(meta["spec"])
    dtype = np.dtype(meta.get("dtype", "float64"))
    params = {n: Tensor(a.astype(dtype), requires_grad=True) for n, a in arrays.items()}
    extra = {k: v for k, v in meta.items() if k not in ("spec", "seed", "dtype")}
    model = Model(spec, params, int(meta.get("seed", 0)), extra)
    expected = {f"{i}.{k}" for i, *_ in _fans(spec) for k in "wb"}
    if set(params) != expected:
        raise ValueError(f"{path}: parameters {sorted(params)} do not match spec {spec.name}")
    return model
