"""Exports patch grids and text embeddings for the `precomputed` backbone.

The encoder is a user module exposing

    PATCH_SIZE: int
    INPUT_RESOLUTION: int
    def encode_image(pil_image) -> (grid, attention)   # grid: (rows, cols, dim), attention: (rows*cols,) or None
    def encode_text(texts: list[str]) -> array          # (len(texts), dim), same space as the grid

Grids are keyed by `pioner.pixel_key`, so the key is computed on the pixels the
Rust side decodes, not on PIL's decoding.

    python python/export_grids.py --encoder my_encoder --images list.txt \
        --texts captions.txt --out grids/
"""

import argparse
import importlib
import json
import os
import sys

import numpy as np
from PIL import Image

import pioner


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--encoder", required=True, help="importable module name")
    ap.add_argument("--images", required=True, help="file with one image path per line")
    ap.add_argument("--texts", help="file with one caption per line")
    ap.add_argument("--out", required=True)
    args = ap.parse_args()

    enc = importlib.import_module(args.encoder)
    os.makedirs(args.out, exist_ok=True)

    with open(args.images) as f:
        paths = [p.strip() for p in f if p.strip()]
    written = 0
    for path in paths:
        key = pioner.pixel_key(path)
        target = os.path.join(args.out, key + ".pgrid")
        if os.path.exists(target):
            continue
        grid, attention = enc.encode_image(Image.open(path).convert("RGB"))
        grid = np.asarray(grid, dtype=np.float32)
        rows, cols, dim = grid.shape
        attn = None if attention is None else np.asarray(attention, dtype=np.float32).ravel().tolist()
        pioner.save_grid(target, grid.ravel().tolist(), rows, cols, dim,
                         (enc.INPUT_RESOLUTION, enc.INPUT_RESOLUTION), enc.PATCH_SIZE, attn, args.encoder)
        written += 1
    print(f"wrote {written} grids ({len(paths) - written} already present)", file=sys.stderr)

    if args.texts:
        with open(args.texts) as f:
            texts = sorted({t.strip() for t in f if t.strip()})
        table = {}
        for i in range(0, len(texts), 256):
            chunk = texts[i:i + 256]
            for t, v in zip(chunk, np.asarray(enc.encode_text(chunk), dtype=np.float64)):
                table[t] = v.tolist()
        with open(os.path.join(args.out, "texts.json"), "w") as f:
            json.dump(table, f)
        print(f"wrote {len(table)} text embeddings", file=sys.stderr)


if __name__ == "__main__":
    main()
