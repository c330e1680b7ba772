"""Wire encodings shared by the remote client and any protocol server.

Tensors travel as base64 little-endian float32 ("WireTensor"); images travel
as base64 PNG with symmetric 8-bit quantization, so a [0,1] float image
round-trips bit-exactly after one quantization.
"""

from __future__ import annotations

import base64
import io

import numpy as np
from PIL import Image

from .errors import ShapeMismatch
from .imaging import ImageBuffer, TensorBuffer

PROTOCOL_VERSION = 1


def tensor_to_wire(t: TensorBuffer) -> dict:
    data = np.ascontiguousarray(t.values, dtype="<f4").tobytes()
    return {
        "shape": list(t.shape),
        "dtype": "f32",
        "data_b64": base64.b64encode(data).decode("ascii"),
    }


def wire_to_tensor(d: dict) -> TensorBuffer:
    if d.get("dtype") != "f32":
        raise ShapeMismatch(f"unsupported wire dtype {d.get('dtype')!r}")
    shape = tuple(int(x) for x in d["shape"])
    raw = base64.b64decode(d["data_b64"])
    expect = 4 * int(np.prod(shape)) if shape else 4
    if len(raw) != expect:
        raise ShapeMismatch(f"wire payload is {len(raw)} bytes, expected {expect}")
    arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
    return TensorBuffer(shape, arr.astype(np.float32))


def image_to_png_b64(img: ImageBuffer) -> str:
    buf = io.BytesIO()
    Image.fromarray(img.to_uint8(), mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def png_b64_to_image(s: str) -> ImageBuffer:
    raw = base64.b64decode(s)
    with Image.open(io.BytesIO(raw)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return ImageBuffer.from_uint8(arr)
