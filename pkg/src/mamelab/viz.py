"""Merge maps (SVG) and per-patch Delta heatmaps (binary PPM) from trace files.

Both renderers are pure functions of their inputs. Patch p of a P x P grid
is token ``p + (p >= cls_index)`` in the trace's original indexing.
"""

from __future__ import annotations

import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass

import numpy as np

KINDS = ("merge_map", "delta_heatmap", "wdelta_heatmap")

# a few samples of a perceptual dark-blue -> green -> yellow ramp
_RAMP = np.array([
    [68, 1, 84],
    [59, 82, 139],
    [33, 145, 140],
    [94, 201, 98],
    [253, 231, 37],
], dtype=np.float64)


@dataclass
class RenderSpec:
    grid_side: int
    cell: int = 16
    palette_seed: int = 0
    kind: str = "merge_map"

    def __post_init__(self):
        if self.grid_side < 1:
            raise ValueError("grid_side must be >= 1")
        if self.cell < 1:
            raise ValueError("cell size must be >= 1 px")
        if self.kind not in KINDS:
            raise ValueError(f"unknown output kind {self.kind!r}; expected one of {KINDS}")


def _token_of_patch(grid_side: int, cls_index) -> np.ndarray:
    p = np.arange(grid_side * grid_side)
    if cls_index is None:
        return p
    return p + (p >= cls_index)


def _check_grid(trace: dict, spec: RenderSpec) -> None:
    if trace["grid_side"] != spec.grid_side:
        raise ValueError(f"trace grid_side {trace['grid_side']} != render grid_side {spec.grid_side}")


def final_groups(trace: dict) -> list[list[int]]:
    """Final token groups as lists of patch indices (class token dropped)."""
    side, cls = trace["grid_side"], trace.get("cls_index")
    tok = _token_of_patch(side, cls)
    patch_of = {int(t): i for i, t in enumerate(tok)}
    if trace["layers"]:
        parts = trace["layers"][-1]["partition"]
    else:
        parts = [[int(t)] for t in tok]
    groups = [sorted(patch_of[t] for t in g if t in patch_of) for g in parts]
    groups = [g for g in groups if g]
    covered = sorted(p for g in groups for p in g)
    if covered != list(range(side * side)):
        raise ValueError("trace partition does not cover the grid")
    return sorted(groups)


def palette(n: int, seed: int) -> list[str]:
    """n distinct-ish stroke colours, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    hues = (np.arange(n) / max(n, 1) + rng.uniform()) % 1.0
    hues = hues[rng.permutation(n)]
    out = []
    for h in hues:
        # HSV with fixed saturation and value
        i = int(h * 6) % 6
        f = h * 6 - math.floor(h * 6)
        v, s = 0.9, 0.8
        p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
        rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
        out.append("#" + "".join(f"{int(round(c * 255)):02x}" for c in rgb))
    return out


def render_merge_map(trace: dict, spec: RenderSpec) -> str:
    """SVG with one rect per patch; patches of the same merged group share a
    stroke colour and unmerged patches have no stroke."""
    _check_grid(trace, spec)
    side, c = spec.grid_side, spec.cell
    groups = [g for g in final_groups(trace) if len(g) > 1]
    colors = palette(len(groups), spec.palette_seed)
    stroke = {}
    for g, col in zip(groups, colors):
        for p in g:
            stroke[p] = col
    sw = max(1, c // 8)
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{side * c}" height="{side * c}" '
        f'viewBox="0 0 {side * c} {side * c}">',
    ]
    for p in range(side * side):
        y, x = divmod(p, side)
        attrs = f'x="{x * c}" y="{y * c}" width="{c}" height="{c}" fill="#f2f2f2"'
        if p in stroke:
            # inset so neighbouring borders do not overlap
            h = sw / 2
            attrs = (f'x="{x * c + h:g}" y="{y * c + h:g}" width="{c - sw:g}" height="{c - sw:g}" '
                     f'fill="#f2f2f2" stroke="{stroke[p]}" stroke-width="{sw}"')
        lines.append(f'  <rect {attrs}/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def parse_merge_map(doc: str) -> list[dict]:
    """Parse an emitted SVG back into its rect attributes (raises on malformed XML)."""
    root = ET.fromstring(doc.encode())
    ns = "{http://www.w3.org/2000/svg}"
    if root.tag != ns + "svg":
        raise ValueError("root element is not svg")
    return [dict(el.attrib) for el in root.iter(ns + "rect")]


def ramp(v: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to uint8 RGB; brighter means higher."""
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0)
    x = v * (len(_RAMP) - 1)
    lo = np.minimum(np.floor(x).astype(int), len(_RAMP) - 2)
    w = (x - lo)[..., None]
    rgb = _RAMP[lo] * (1 - w) + _RAMP[lo + 1] * w
    return np.round(rgb).astype(np.uint8)


def render_delta_heatmap(values, spec: RenderSpec) -> bytes:
    """Binary PPM (P6, maxval 255) of a length-P^2 per-patch field, min-max normalized."""
    v = np.asarray(values, dtype=np.float64).ravel()
    side = spec.grid_side
    if v.size != side * side:
        raise ValueError(f"need {side * side} values, got {v.size}")
    if not np.all(np.isfinite(v)):
        raise ValueError("heatmap values must be finite")
    span = v.max() - v.min()
    norm = (v - v.min()) / span if span > 0 else np.zeros_like(v)
    img = ramp(norm).reshape(side, side, 3)
    img = np.repeat(np.repeat(img, spec.cell, axis=0), spec.cell, axis=1)
    header = f"P6\n{side * spec.cell} {side * spec.cell}\n255\n".encode()
    return header + img.tobytes()


def read_ppm(data: bytes) -> np.ndarray:
    """Decode a P6 image written by :func:`render_delta_heatmap`."""
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6" or parts[2] != b"255":
        raise ValueError("not a maxval-255 P6 image")
    w, h = (int(x) for x in parts[1].split())
    px = np.frombuffer(parts[3], dtype=np.uint8)
    if px.size != 3 * w * h:
        raise ValueError(f"expected {3 * w * h} pixel bytes, got {px.size}")
    return px.reshape(h, w, 3)


def patch_field(trace: dict, layer: int | None = None, kind: str = "delta_heatmap") -> np.ndarray:
    """Per-patch delta_hat (or exp(-delta_hat/tau)) at one traced layer.

    A patch already merged into a group takes its group's value. ``layer``
    picks a traced layer by its index; the default is the first one.
    """
    layers = trace["layers"]
    if not layers:
        raise ValueError("trace has no layers")
    k = 0 if layer is None else next((i for i, l in enumerate(layers) if l["layer"] == layer), None)
    if k is None:
        raise ValueError(f"layer {layer} not in trace")
    entry = layers[k]
    dh = np.asarray(entry["delta_hat"], dtype=np.float64)
    if kind == "wdelta_heatmap":
        dh = np.exp(-dh / entry["tau"])
    elif kind != "delta_heatmap":
        raise ValueError(f"unknown field kind {kind!r}")
    # groups at this layer's input are the previous layer's partition
    if k == 0:
        before = [[int(t)] for t in entry["orig_index_before"]]
    else:
        before = layers[k - 1]["partition"]
    if len(before) != dh.size:
        raise ValueError("delta_hat length does not match the token count")
    pos_of = {t: i for i, g in enumerate(before) for t in g}
    tok = _token_of_patch(trace["grid_side"], trace.get("cls_index"))
    return np.array([dh[pos_of[int(t)]] for t in tok])


def render(trace: dict, spec: RenderSpec, layer: int | None = None) -> bytes:
    """Dispatch on ``spec.kind``; returns the file contents."""
    _check_grid(trace, spec)
    if spec.kind == "merge_map":
        return render_merge_map(trace, spec).encode()
    return render_delta_heatmap(patch_field(trace, layer, spec.kind), spec)
