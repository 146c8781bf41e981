"""The auxiliary classifier and the per-task masked networks.

The auxiliary model is a plain conv/FC classifier over the full class set;
once pretrained it is frozen and shared. Each task gets trainable copies of
the conv and FC weights, a non-negative soft mask per conv kernel, and a
fresh head over its own classes. A task's conv layer applies the masked
kernel mask * weight; its forward pass also pushes each hidden FC input
through the frozen auxiliary FC weights so the two output streams can be
aligned class-conditionally.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add_bias, conv2d, hadamard, matmul, relu, reshape
from .errors import DataError, MaskConstraintError, ShapeError

CHECKPOINT_MAGIC = b"DMTL"
CHECKPOINT_VERSION = 1

_STREAM_AUX_INIT = 10
_STREAM_MASK = 11
_STREAM_HEAD = 12


@dataclass(frozen=True)
class Architecture:
    """Conv/FC stack description shared by the auxiliary and task networks."""

    input_shape: tuple  # (channels, height, width)
    conv_channels: tuple
    conv_kernels: tuple
    conv_strides: tuple
    conv_paddings: tuple
    fc_widths: tuple
    class_count: int

    def __post_init__(self):
        n = len(self.conv_channels)
        if not (len(self.conv_kernels) == len(self.conv_strides) == len(self.conv_paddings) == n):
            raise ShapeError("conv_channels/kernels/strides/paddings must have equal lengths")
        if n < 1 or len(self.fc_widths) < 1:
            raise ShapeError("need at least one conv layer and one hidden FC layer")
        if self.class_count < 2:
            raise ShapeError(f"class_count must be >= 2, got {self.class_count}")
        self.conv_output_shapes()  # raises if any spatial dim collapses

    def conv_output_shapes(self):
        """(channels, h, w) after each conv layer."""
        c, h, w = self.input_shape
        shapes = []
        for out_c, k, s, p in zip(
            self.conv_channels, self.conv_kernels, self.conv_strides, self.conv_paddings
        ):
            h = (h + 2 * p - k) // s + 1
            w = (w + 2 * p - k) // s + 1
            if h < 1 or w < 1:
                raise ShapeError(
                    f"conv stack collapses below 1x1 on input {self.input_shape} (layer {len(shapes)})"
                )
            c = out_c
            shapes.append((c, h, w))
        return shapes

    def flat_features(self) -> int:
        c, h, w = self.conv_output_shapes()[-1]
        return c * h * w

    def with_classes(self, class_count: int) -> "Architecture":
        return Architecture(
            self.input_shape,
            self.conv_channels,
            self.conv_kernels,
            self.conv_strides,
            self.conv_paddings,
            self.fc_widths,
            class_count,
        )

    def to_json_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "conv_channels": list(self.conv_channels),
            "conv_kernels": list(self.conv_kernels),
            "conv_strides": list(self.conv_strides),
            "conv_paddings": list(self.conv_paddings),
            "fc_widths": list(self.fc_widths),
            "class_count": self.class_count,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "Architecture":
        return cls(
            tuple(d["input_shape"]),
            tuple(d["conv_channels"]),
            tuple(d["conv_kernels"]),
            tuple(d["conv_strides"]),
            tuple(d["conv_paddings"]),
            tuple(d["fc_widths"]),
            int(d["class_count"]),
        )


def default_architecture(input_shape, class_count) -> Architecture:
    """Desk-scale default: two stride-2 convs, two hidden FC layers."""
    return Architecture(
        input_shape=tuple(input_shape),
        conv_channels=(8, 16),
        conv_kernels=(3, 3),
        conv_strides=(2, 2),
        conv_paddings=(1, 1),
        fc_widths=(64, 32),
        class_count=class_count,
    )


def _he_normal(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def extract_knowledge(mask: Tensor, kernel: Tensor) -> Tensor:
    """Masked kernel mask * weight, the knowledge actually convolved.

    Rejects negative mask entries: the optimizer projects masks onto the
    non-negative orthant after every step, so a negative entry here means a
    broken invariant upstream.
    """
    if mask.shape != kernel.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match kernel {kernel.shape}")
    if mask.data.min() < 0.0:
        raise MaskConstraintError(
            f"mask has negative entries (min={mask.data.min():g}); projection was skipped somewhere"
        )
    return hadamard(mask, kernel)


def masked_conv_forward(masked_kernel: Tensor, x: Tensor, bias: Tensor, stride: int, padding: int) -> Tensor:
    """ReLU(conv(x, masked_kernel) + bias)."""
    return relu(add_bias(conv2d(x, masked_kernel, stride, padding), bias))


class AuxModel:
    """Auxiliary classifier over the full class set; frozen after pretraining."""

    def __init__(self, arch: Architecture, params: dict):
        self.arch = arch
        self.params = params

    @classmethod
    def initialize(cls, arch: Architecture, seed: int) -> "AuxModel":
        rng = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_AUX_INIT]))
        params = {}
        in_c = arch.input_shape[0]
        for i, (out_c, k) in enumerate(zip(arch.conv_channels, arch.conv_kernels)):
            params[f"conv{i}.weight"] = Tensor(_he_normal(rng, (out_c, in_c, k, k), in_c * k * k))
            params[f"conv{i}.bias"] = Tensor(np.zeros(out_c))
            in_c = out_c
        in_d = arch.flat_features()
        for i, width in enumerate(arch.fc_widths):
            params[f"fc{i}.weight"] = Tensor(_he_normal(rng, (in_d, width), in_d))
            params[f"fc{i}.bias"] = Tensor(np.zeros(width))
            in_d = width
        params["head.weight"] = Tensor(_he_normal(rng, (in_d, arch.class_count), in_d))
        params["head.bias"] = Tensor(np.zeros(arch.class_count))
        return cls(arch, params)

    def forward(self, x) -> Tensor:
        """Unmasked forward pass; returns logits over the full class set."""
        t = x if isinstance(x, Tensor) else Tensor(x)
        if t.ndim != 4 or t.shape[1:] != tuple(self.arch.input_shape):
            raise ShapeError(f"input {t.shape} does not match architecture {self.arch.input_shape}")
        for i, (s, p) in enumerate(zip(self.arch.conv_strides, self.arch.conv_paddings)):
            t = relu(add_bias(conv2d(t, self.params[f"conv{i}.weight"], s, p), self.params[f"conv{i}.bias"]))
        t = reshape(t, (t.shape[0], self.arch.flat_features()))
        for i in range(len(self.arch.fc_widths)):
            t = relu(add_bias(matmul(t, self.params[f"fc{i}.weight"]), self.params[f"fc{i}.bias"]))
        return add_bias(matmul(t, self.params["head.weight"]), self.params["head.bias"])

    def parameters(self) -> dict:
        return self.params

    def digest(self) -> str:
        return parameter_digest(self.params)

    def save(self, path) -> None:
        header = {"kind": "aux", "arch": self.arch.to_json_dict()}
        save_checkpoint(path, header, {k: v.data for k, v in self.params.items()})

    @classmethod
    def load(cls, path) -> "AuxModel":
        header, arrays = load_checkpoint(path)
        if header.get("kind") != "aux":
            raise DataError(f"{path}: not an auxiliary checkpoint (kind={header.get('kind')!r})")
        arch = Architecture.from_json_dict(header["arch"])
        return cls(arch, {k: Tensor(v) for k, v in arrays.items()})


@dataclass
class TaskActivations:
    """One forward pass: logits plus the two FC output streams for alignment."""

    logits: Tensor
    fc_task: list
    fc_aux: list


class TaskNetwork:
    """Per-task network: masked conv copies, FC copies, fresh head."""

    def __init__(self, arch, label_map, conv_weights, masks, conv_biases,
                 fc_weights, fc_biases, head_weight, head_bias,
                 aux_fc_weights, aux_fc_biases, task_id=0):
        self.arch = arch
        self.label_map = tuple(label_map)
        self.conv_weights = conv_weights
        self.masks = masks
        self.conv_biases = conv_biases
        self.fc_weights = fc_weights
        self.fc_biases = fc_biases
        self.head_weight = head_weight
        self.head_bias = head_bias
        self.aux_fc_weights = aux_fc_weights  # frozen references, never stepped
        self.aux_fc_biases = aux_fc_biases
        self.task_id = task_id

    def parameters(self) -> dict:
        """Trainable tensors only (the frozen aux references are excluded)."""
        out = {}
        for i in range(len(self.conv_weights)):
            out[f"conv{i}.weight"] = self.conv_weights[i]
            out[f"mask{i}"] = self.masks[i]
            out[f"conv{i}.bias"] = self.conv_biases[i]
        for i in range(len(self.fc_weights)):
            out[f"fc{i}.weight"] = self.fc_weights[i]
            out[f"fc{i}.bias"] = self.fc_biases[i]
        out["head.weight"] = self.head_weight
        out["head.bias"] = self.head_bias
        return out

    def forward(self, x, want_alignment: bool = True) -> TaskActivations:
        """Masked conv stack, then the FC stack under both weight sets.

        The auxiliary stream applies the frozen aux FC weights to this task's
        own hidden activations (not to aux-network activations), producing
        the pair of streams the class-conditional alignment compares.
        """
        t = x if isinstance(x, Tensor) else Tensor(x)
        if t.ndim != 4 or t.shape[1:] != tuple(self.arch.input_shape):
            raise ShapeError(f"input {t.shape} does not match architecture {self.arch.input_shape}")
        for i, (s, p) in enumerate(zip(self.arch.conv_strides, self.arch.conv_paddings)):
            masked = extract_knowledge(self.masks[i], self.conv_weights[i])
            t = masked_conv_forward(masked, t, self.conv_biases[i], s, p)
        t = reshape(t, (t.shape[0], self.arch.flat_features()))

        fc_task, fc_aux = [], []
        for i in range(len(self.fc_weights)):
            task_out = relu(add_bias(matmul(t, self.fc_weights[i]), self.fc_biases[i]))
            if want_alignment:
                fc_aux.append(relu(add_bias(matmul(t, self.aux_fc_weights[i]), self.aux_fc_biases[i])))
            fc_task.append(task_out)
            t = task_out
        logits = add_bias(matmul(t, self.head_weight), self.head_bias)
        return TaskActivations(logits, fc_task, fc_aux)

    def save(self, path) -> None:
        header = {
            "kind": "task",
            "arch": self.arch.to_json_dict(),
            "label_map": list(self.label_map),
            "task_id": self.task_id,
        }
        save_checkpoint(path, header, {k: v.data for k, v in self.parameters().items()})

    @classmethod
    def load(cls, path, aux: AuxModel) -> "TaskNetwork":
        header, arrays = load_checkpoint(path)
        if header.get("kind") != "task":
            raise DataError(f"{path}: not a task checkpoint (kind={header.get('kind')!r})")
        arch = Architecture.from_json_dict(header["arch"])
        if arch.with_classes(aux.arch.class_count) != aux.arch:
            raise DataError(f"{path}: checkpoint architecture does not match the auxiliary model")
        n_conv = len(arch.conv_channels)
        n_fc = len(arch.fc_widths)
        return cls(
            arch,
            header["label_map"],
            [Tensor(arrays[f"conv{i}.weight"]) for i in range(n_conv)],
            [Tensor(arrays[f"mask{i}"]) for i in range(n_conv)],
            [Tensor(arrays[f"conv{i}.bias"]) for i in range(n_conv)],
            [Tensor(arrays[f"fc{i}.weight"]) for i in range(n_fc)],
            [Tensor(arrays[f"fc{i}.bias"]) for i in range(n_fc)],
            Tensor(arrays["head.weight"]),
            Tensor(arrays["head.bias"]),
            [Tensor(aux.params[f"fc{i}.weight"].data.copy()) for i in range(n_fc)],
            [Tensor(aux.params[f"fc{i}.bias"].data.copy()) for i in range(n_fc)],
            task_id=int(header.get("task_id", 0)),
        )


def init_task(aux: AuxModel, task_classes, seed: int, task_id: int = 0,
              mask_init: str = "uniform") -> TaskNetwork:
    """Build a task network from the pretrained auxiliary model.

    Conv and FC weights are deep copies of the aux weights; masks start near
    the identity, Uniform(0.9, 1.1) per entry ("ones" pins them at exactly 1
    for the single-task control); the head over the task's classes is a fresh
    He-scaled draw. Mask and head use independent seed streams so the head
    init does not depend on the mask mode.

    ``task_classes`` is either a TaskDataset or an explicit label_map sequence.
    """
    label_map = tuple(task_classes.label_map) if hasattr(task_classes, "label_map") else tuple(task_classes)
    if len(set(label_map)) != len(label_map):
        raise DataError(f"label_map must be injective, got {label_map}")
    c_j = len(label_map)
    arch = aux.arch.with_classes(c_j)

    mask_rng = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_MASK, task_id]))
    head_rng = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_HEAD, task_id]))

    conv_weights, masks, conv_biases = [], [], []
    for i in range(len(arch.conv_channels)):
        w = aux.params[f"conv{i}.weight"].data
        conv_weights.append(Tensor(w.copy()))
        if mask_init == "uniform":
            masks.append(Tensor(mask_rng.uniform(0.9, 1.1, size=w.shape)))
        elif mask_init == "ones":
            masks.append(Tensor(np.ones(w.shape)))
        else:
            raise DataError(f"unknown mask_init {mask_init!r}")
        conv_biases.append(Tensor(aux.params[f"conv{i}.bias"].data.copy()))

    n_fc = len(arch.fc_widths)
    fc_weights = [Tensor(aux.params[f"fc{i}.weight"].data.copy()) for i in range(n_fc)]
    fc_biases = [Tensor(aux.params[f"fc{i}.bias"].data.copy()) for i in range(n_fc)]
    head_in = arch.fc_widths[-1]
    head_weight = Tensor(_he_normal(head_rng, (head_in, c_j), head_in))
    head_bias = Tensor(np.zeros(c_j))

    # Private frozen copies of the aux FC weights: no tensor is shared across
    # tasks, so concurrent per-task backward passes touch disjoint state.
    return TaskNetwork(
        arch, label_map, conv_weights, masks, conv_biases, fc_weights, fc_biases,
        head_weight, head_bias,
        [Tensor(aux.params[f"fc{i}.weight"].data.copy()) for i in range(n_fc)],
        [Tensor(aux.params[f"fc{i}.bias"].data.copy()) for i in range(n_fc)],
        task_id=task_id,
    )


def parameter_digest(params: dict) -> str:
    """SHA-256 over name-sorted parameter bytes; detects any mutation."""
    h = hashlib.sha256()
    for name in sorted(params):
        t = params[name]
        data = t.data if isinstance(t, Tensor) else np.asarray(t)
        h.update(name.encode())
        h.update(str(data.shape).encode())
        h.update(np.ascontiguousarray(data).tobytes())
    return h.hexdigest()


def save_checkpoint(path, header: dict, arrays: dict) -> None:
    """Single-file little-endian checkpoint: JSON header + named f64 records."""
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob += struct.pack("<I", len(header_bytes))
    blob += header_bytes
    blob += struct.pack("<I", len(arrays))
    for name in sorted(arrays):
        data = np.ascontiguousarray(arrays[name], dtype=np.float64)
        name_bytes = name.encode("utf-8")
        blob += struct.pack("<H", len(name_bytes))
        blob += name_bytes
        blob += struct.pack("<BB", 0, data.ndim)  # dtype 0 = float64
        blob += struct.pack(f"<{data.ndim}I", *data.shape)
        blob += data.astype("<f8").tobytes()
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(bytes(blob))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    with open(path, "rb") as f:
        raw = f.read()
    view = memoryview(raw)
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic {raw[:4]!r})")
    off = 4
    (version,) = struct.unpack_from("<I", view, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", view, off)
    off += 4
    header = json.loads(bytes(view[off : off + hlen]).decode("utf-8"))
    off += hlen
    (count,) = struct.unpack_from("<I", view, off)
    off += 4
    arrays = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", view, off)
            off += 2
            name = bytes(view[off : off + nlen]).decode("utf-8")
            off += nlen
            dtype_code, ndim = struct.unpack_from("<BB", view, off)
            off += 2
            if dtype_code != 0:
                raise DataError(f"{path}: unknown dtype code {dtype_code} for {name}")
            shape = struct.unpack_from(f"<{ndim}I", view, off)
            off += 4 * ndim
            n_bytes = int(np.prod(shape, dtype=np.int64)) * 8 if ndim else 8
            arrays[name] = (
                np.frombuffer(raw, dtype="<f8", count=n_bytes // 8, offset=off)
                .reshape(shape)
                .astype(np.float64)
            )
            off += n_bytes
    except struct.error as e:
        raise DataError(f"{path}: truncated checkpoint ({e})") from e
    if off != len(raw):
        raise DataError(f"{path}: {len(raw) - off} trailing bytes after last record")
    return header, arrays
