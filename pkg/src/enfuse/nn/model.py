"""Encoder model container: conv backbone plus an attachable head.

The backbone ends in conv feature maps; its feature vector is the spatial
mean of the final conv activation (dimension = channel count). Heads are
layer stacks consuming those maps (a classification head or a contrastive
projection head). Persistence uses a small versioned binary container.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from ..errors import IntegrityError, InvalidArgumentError, InvalidStateError
from .layers import Conv2d, Dropout, Layer, Softmax, layer_from_descriptor

MODEL_MAGIC = b"ETSEFM1\x00"


class EncoderModel:
    def __init__(self, backbone: list[Layer], head: list[Layer] | None = None,
                 feature_dim: int | None = None):
        if not backbone:
            raise InvalidArgumentError("backbone may not be empty")
        self.backbone = backbone
        self.head = head or []
        conv_channels = [l.out_ch for l in backbone if isinstance(l, Conv2d)]
        if feature_dim is None:
            if not conv_channels:
                raise InvalidArgumentError("backbone has no conv layers")
            feature_dim = conv_channels[-1]
        self.feature_dim = feature_dim
        self.meta: dict = {}  # provenance: stage, method tag, training logs

    # -- structure ---------------------------------------------------------

    @property
    def layers(self) -> list[Layer]:
        return self.backbone + self.head

    def set_head(self, head: list[Layer] | None):
        self.head = head or []

    def last_conv_index(self) -> int:
        idx = [i for i, l in enumerate(self.backbone) if isinstance(l, Conv2d)]
        if not idx:
            raise InvalidStateError("model has no conv layer")
        return idx[-1]

    def set_trainable(self, backbone_flags=None, head_flags=None):
        if backbone_flags is not None:
            for layer, flag in zip(self.backbone, backbone_flags):
                layer.trainable = bool(flag)
        if head_flags is not None:
            for layer, flag in zip(self.head, head_flags):
                layer.trainable = bool(flag)

    def freeze_backbone(self, upto: int | None = None):
        """Freeze backbone layers [0, upto); the whole backbone when upto is None."""
        stop = len(self.backbone) if upto is None else upto
        for layer in self.backbone[:stop]:
            layer.trainable = False

    def reseed_dropout(self, seed: int):
        i = 0
        for layer in self.layers:
            if isinstance(layer, Dropout):
                layer.reseed(seed + i)
                i += 1

    # -- forward / backward ------------------------------------------------

    def forward(self, x: np.ndarray, training: bool = False, *,
                through_head: bool = True, skip_final_softmax: bool = False) -> np.ndarray:
        """Run the stack; caches stay in the layers for a subsequent backward."""
        out = np.asarray(x, dtype=np.float64)
        stack = self.layers if through_head else self.backbone
        if skip_final_softmax and stack and isinstance(stack[-1], Softmax):
            stack = stack[:-1]
        self._active_stack = stack
        for i, layer in enumerate(stack):
            try:
                out = layer.forward(out, training=training)
            except InvalidArgumentError as exc:
                raise InvalidArgumentError(f"layer {i} ({type(layer).__name__}): {exc}") from exc
        return out

    def backward(self, dout: np.ndarray, *, stop_at: int = 0) -> np.ndarray:
        """Backprop through the stack used by the last forward call.

        `stop_at` is an index into that stack; gradients are propagated down
        to (and excluding) it, returning d(output)/d(activation at stop_at).
        """
        grad = dout
        for layer in reversed(self._active_stack[stop_at:]):
            grad = layer.backward(grad)
        return grad

    def zero_grads(self):
        for layer in self.layers:
            layer.zero_grads()

    def named_parameters(self, trainable_only: bool = False):
        out = {}
        for i, layer in enumerate(self.layers):
            if trainable_only and not layer.trainable:
                continue
            for name, arr in layer.params.items():
                out[f"{i}.{name}"] = arr
        return out

    def named_grads(self, trainable_only: bool = False):
        out = {}
        for i, layer in enumerate(self.layers):
            if trainable_only and not layer.trainable:
                continue
            for name, arr in layer.grads.items():
                out[f"{i}.{name}"] = arr
        return out

    def features(self, x: np.ndarray) -> np.ndarray:
        """Backbone feature vectors: spatial mean of the final conv maps."""
        maps = self.forward(x, training=False, through_head=False)
        if maps.ndim != 4:
            raise InvalidStateError("backbone did not produce conv maps")
        return maps.mean(axis=(2, 3))

    # -- persistence -------------------------------------------------------

    def save_bytes(self) -> bytes:
        header = {
            "backbone": [l.descriptor() for l in self.backbone],
            "head": [l.descriptor() for l in self.head],
            "feature_dim": self.feature_dim,
            "trainable": [bool(l.trainable) for l in self.layers],
            "meta": self.meta,
            "arrays": [
                {"layer": i, "name": name, "shape": list(arr.shape)}
                for i, layer in enumerate(self.layers)
                for name, arr in sorted(layer.params.items())
            ],
        }
        buf = io.BytesIO()
        buf.write(MODEL_MAGIC)
        hdr = json.dumps(header, sort_keys=True).encode()
        buf.write(struct.pack("<I", len(hdr)))
        buf.write(hdr)
        for i, layer in enumerate(self.layers):
            for name, arr in sorted(layer.params.items()):
                buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return buf.getvalue()

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.save_bytes())

    @classmethod
    def load_bytes(cls, blob: bytes) -> "EncoderModel":
        if blob[:8] != MODEL_MAGIC:
            raise IntegrityError("bad model magic bytes")
        (hlen,) = struct.unpack("<I", blob[8:12])
        header = json.loads(blob[12:12 + hlen].decode())
        backbone = [layer_from_descriptor(d) for d in header["backbone"]]
        head = [layer_from_descriptor(d) for d in header["head"]]
        model = cls(backbone, head, feature_dim=header["feature_dim"])
        model.meta = header.get("meta", {})
        offset = 12 + hlen
        layers = model.layers
        for rec in header["arrays"]:
            layer = layers[rec["layer"]]
            shape = tuple(rec["shape"])
            size = int(np.prod(shape)) * 8
            arr = np.frombuffer(blob[offset:offset + size], dtype="<f8").reshape(shape)
            offset += size
            name = rec["name"]
            if name not in layer.params or layer.params[name].shape != shape:
                raise IntegrityError(f"shape chain mismatch at layer {rec['layer']}.{name}")
            layer.params[name] = arr.copy()
        if offset != len(blob):
            raise IntegrityError("trailing bytes in model file")
        for layer, flag in zip(model.layers, header["trainable"]):
            layer.trainable = flag
        model.zero_grads()
        return model

    @classmethod
    def load(cls, path) -> "EncoderModel":
        with open(path, "rb") as f:
            return cls.load_bytes(f.read())
