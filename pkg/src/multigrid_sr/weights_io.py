"""Binary weight container.

Layout (all integers little-endian)::

    magic        8 bytes   b"MGSRWGT\\0"
    version      u32
    desc_len     u32, then desc_len bytes of UTF-8 descriptor text
    n_blocks     u32
    per block:
      name_len   u16, then the UTF-8 name
      ndim       u8, then ndim x u32 dims
      nbytes     u64, then nbytes of float32 data

The descriptor is a space-separated ``key=value`` line that lets the loader
rebuild the plan (or discriminator geometry) without outside information.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .discriminator import DiscriminatorWeights
from .generator import GeneratorWeights
from .plan import ModuleTag, NetworkPlan
from .tensor import Tensor

MAGIC = b"MGSRWGT\0"
VERSION = 1


class ContainerError(ValueError):
    """Malformed or mismatched weight file.  ``code`` is a short machine tag."""

    def __init__(self, code, message):
        self.code = code
        self.message = message
        super().__init__(f"{code}: {message}")


def header_size(descriptor, blocks):
    """Bytes that are not parameter data, for ``[(name, shape)]`` blocks."""
    size = len(MAGIC) + 4 + 4 + len(descriptor.encode()) + 4
    for name, shape in blocks:
        size += 2 + len(name.encode()) + 1 + 4 * len(shape) + 8
    return size


def write_container(path, descriptor, blocks):
    buf = io.BytesIO()
    desc = descriptor.encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(desc)))
    buf.write(desc)
    buf.write(struct.pack("<I", len(blocks)))
    for name, arr in blocks:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(struct.pack("<Q", arr.nbytes))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise ContainerError("truncated", f"needed {n} bytes at offset {self.pos}, file has {len(self.data)}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_container(path):
    """Return ``(descriptor, [(name, float32 array)])``."""
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise ContainerError("bad magic", f"{path} is not a weight container")
    version, desc_len = r.unpack("<II")
    if version != VERSION:
        raise ContainerError("bad version", f"format version {version}, expected {VERSION}")
    try:
        descriptor = r.take(desc_len).decode()
    except UnicodeDecodeError as exc:
        raise ContainerError("bad descriptor", str(exc)) from None
    (n_blocks,) = r.unpack("<I")
    blocks = []
    for _ in range(n_blocks):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode(errors="replace")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        (nbytes,) = r.unpack("<Q")
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise ContainerError("bad block", f"{name}: {nbytes} bytes does not match shape {shape}")
        arr = np.frombuffer(r.take(nbytes), dtype="<f4").reshape(shape).astype(np.float32)
        blocks.append((name, arr))
    if r.pos != len(r.data):
        raise ContainerError("trailing data", f"{len(r.data) - r.pos} unexpected bytes at end of file")
    return descriptor, blocks


def _generator_blocks(plan, weights):
    weights.check(plan)
    blocks = []
    for tag in plan.tags:
        w, b = weights[tag]
        blocks.append((f"{tag}:weight", w.data))
        blocks.append((f"{tag}:bias", b.data))
    return blocks


def save_weights(path, plan, weights):
    """Write generator weights; the descriptor records the plan."""
    write_container(path, "kind=generator " + plan.descriptor(), _generator_blocks(plan, weights))


def generator_header_size(plan):
    blocks = [(f"{tag}:{part}", shape) for tag, spec in plan
              for part, shape in (("weight", spec.weight_shape()), ("bias", (spec.out_channels,)))]
    return header_size("kind=generator " + plan.descriptor(), blocks)


def _split_kind(descriptor):
    kind, _, rest = descriptor.partition(" ")
    if not kind.startswith("kind="):
        raise ContainerError("bad descriptor", f"missing kind in {descriptor!r}")
    return kind[5:], rest


def load_weights(path, requires_grad=True):
    """Return ``(plan, GeneratorWeights)`` from a container file."""
    descriptor, blocks = read_container(path)
    kind, rest = _split_kind(descriptor)
    if kind != "generator":
        raise ContainerError("wrong kind", f"expected generator weights, file holds {kind!r}")
    try:
        plan = NetworkPlan.from_descriptor(rest)
    except ValueError as exc:
        raise ContainerError("bad descriptor", str(exc)) from None
    expected = [f"{tag}:{part}" for tag in plan.tags for part in ("weight", "bias")]
    names = [name for name, _ in blocks]
    if names != expected:
        missing = sorted(set(expected) - set(names))[:3]
        extra = sorted(set(names) - set(expected))[:3]
        raise ContainerError("tag mismatch", f"blocks do not match the plan (missing {missing}, extra {extra})")
    arrays = dict(blocks)
    params = {}
    for tag in plan.tags:
        params[tag] = (
            Tensor(arrays[f"{tag}:weight"], requires_grad=requires_grad, name=f"{tag}:weight"),
            Tensor(arrays[f"{tag}:bias"], requires_grad=requires_grad, name=f"{tag}:bias"),
        )
    weights = GeneratorWeights(params)
    try:
        weights.check(plan)
    except ValueError as exc:
        raise ContainerError("shape mismatch", str(exc)) from None
    return plan, weights


def save_discriminator(path, weights):
    desc = "kind=discriminator widths=" + ",".join(map(str, weights.widths))
    write_container(path, desc, [(name, t.data) for name, t in weights.named_parameters()])


def load_discriminator(path):
    descriptor, blocks = read_container(path)
    kind, rest = _split_kind(descriptor)
    if kind != "discriminator":
        raise ContainerError("wrong kind", f"expected discriminator weights, file holds {kind!r}")
    try:
        fields = dict(item.split("=", 1) for item in rest.split())
        widths = tuple(int(w) for w in fields["widths"].split(","))
    except (KeyError, ValueError) as exc:
        raise ContainerError("bad descriptor", f"cannot parse {rest!r}: {exc}") from None
    arrays = dict(blocks)
    missing = [n for n in _disc_names(len(widths)) if n not in arrays]
    if missing or len(arrays) != len(_disc_names(len(widths))):
        raise ContainerError("tag mismatch", f"discriminator blocks do not match (missing {missing[:3]})")
    layers = []
    for s in range(len(widths)):
        level = []
        for j in range(4):
            level.append(
                (
                    Tensor(arrays[f"D/{s}/{j}:weight"], requires_grad=True),
                    Tensor(arrays[f"D/{s}/{j}:bias"], requires_grad=True),
                )
            )
        layers.append(level)
    head = (Tensor(arrays["D/head:weight"], requires_grad=True), Tensor(arrays["D/head:bias"], requires_grad=True))
    weights = DiscriminatorWeights(widths, layers, head)
    weights.check()
    return weights


def _disc_names(n_levels):
    names = [f"D/{s}/{j}:{part}" for s in range(n_levels) for j in range(4) for part in ("weight", "bias")]
    return names + ["D/head:weight", "D/head:bias"]


def tag_of(block_name):
    return ModuleTag.parse(block_name.rsplit(":", 1)[0])
