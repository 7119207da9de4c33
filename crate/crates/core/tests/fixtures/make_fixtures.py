"""Writes the golden PFM fixtures with numpy, independently of the Rust writer.

Expected pixel values (top row first) are stored next to them in expected.json.
"""
import json

import numpy as np


def write(path, arr, big_endian=False):
    arr = np.asarray(arr, dtype=np.float32)
    tag = "PF" if arr.ndim == 3 else "Pf"
    h, w = arr.shape[:2]
    scale = 1.0 if big_endian else -1.0
    dtype = ">f4" if big_endian else "<f4"
    with open(path, "wb") as f:
        f.write(f"{tag}\n{w} {h}\n{scale}\n".encode("ascii"))
        f.write(np.flipud(arr).astype(dtype).tobytes())


gray = np.array([[0.5 * y + 0.25 * x - 1.0 for x in range(3)] for y in range(2)])
color = np.array([[[x + 10 * y, -0.5 * (x + y), 1.0 / 3.0] for x in range(2)] for y in range(2)])
flow = np.zeros((2, 3, 3))
for y in range(2):
    for x in range(3):
        flow[y, x] = [x - 1.5, 0.25 * y, 0.0]

write("gray_le.pfm", gray)
write("gray_be.pfm", gray, big_endian=True)
write("color_be.pfm", color, big_endian=True)
write("flow_le.pfm", flow)

expected = {
    "gray": {"width": 3, "height": 2, "data": gray.astype(np.float32).astype(float).ravel().tolist()},
    "color": {"width": 2, "height": 2, "data": color.astype(np.float32).astype(float).ravel().tolist()},
    "flow": {"width": 3, "height": 2, "data": flow.astype(np.float32).astype(float).ravel().tolist()},
}
with open("expected.json", "w") as f:
    json.dump(expected, f, indent=1)
