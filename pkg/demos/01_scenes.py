"""Walk through the synthetic grounding data: scenes, queries, boxes and patch masks.

Run: python3 demos/01_scenes.py
"""
import numpy as np

from hivg.data import build_arrays, detokenize, generate, parse_query, resolve

SHADES = " .:-=+*#%@"


def ascii_image(pixels: np.ndarray, box) -> str:
    # grey level per pixel on a 32x32 subsample, box border drawn with 'o'
    grey = pixels.mean(axis=0)[::2, ::2]
    h, w = grey.shape
    cx, cy, bw, bh = box
    x0, x1 = int((cx - bw / 2) * w), int((cx + bw / 2) * w) - 1
    y0, y1 = int((cy - bh / 2) * h), int((cy + bh / 2) * h) - 1
    rows = []
    for y in range(h):
        row = ""
        for x in range(w):
            on_edge = (y in (y0, y1) and x0 <= x <= x1) or (x in (x0, x1) and y0 <= y <= y1)
            row += "o" if on_edge else SHADES[min(int(grey[y, x] * len(SHADES)), len(SHADES) - 1)]
        rows.append(row)
    return "\n".join(rows)


for difficulty in ("attribute", "relational", "two-hop"):
    spec = generate(seed=7, count=1, difficulty=difficulty)[0]
    arr = build_arrays([spec], 64, 64, 8)
    print(f"--- {difficulty} ---")
    print("query:", spec.query)
    print("tokens:", arr.tokens[0].tolist(), "->", detokenize(arr.tokens[0]))
    for i, o in enumerate(spec.objects):
        mark = "*" if i == spec.target_index else " "
        print(f" {mark} {o.size:5s} {o.color:6s} {o.shape:8s} at ({o.cx:.2f}, {o.cy:.2f})")

    # The query resolves to exactly one object: that is what makes the scene well formed.
    print("objects matching the query:", resolve(parse_query(spec.query), spec.objects))
    print("box (cx, cy, w, h):", np.round(arr.boxes[0], 3))
    print(ascii_image(arr.pixels[0], arr.boxes[0]))
    print("patch mask (8x8 grid, 1 = patch overlaps the box):")
    print(arr.masks[0].reshape(8, 8).astype(int))
    print()
