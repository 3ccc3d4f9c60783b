#!/usr/bin/env python3
"""Convert an image tree into the PGM/PPM layout the loader reads.

    src/<class>/<any image Pillow opens>  ->  dst/<class>/<stem>.pgm|.ppm

Nested class folders (Omniglot's alphabet/character) are flattened into one
class name joined by '__'. Images are resized to --size x --size with
bilinear filtering when --size is given.
"""

import argparse
import sys
from pathlib import Path

from PIL import Image

SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".pgm", ".ppm", ".pnm", ".webp"}


def class_dirs(root: Path):
    for d in sorted(p for p in root.rglob("*") if p.is_dir()):
        if any(f.suffix.lower() in SUFFIXES for f in d.iterdir() if f.is_file()):
            yield d


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("src", type=Path)
    ap.add_argument("dst", type=Path)
    ap.add_argument("--gray", action="store_true", help="write single-channel PGM (default: PPM)")
    ap.add_argument("--size", type=int, default=None, help="resize to SIZE x SIZE")
    ap.add_argument("--invert", action="store_true", help="invert intensities (dark strokes become bright)")
    args = ap.parse_args(argv)

    if not args.src.is_dir():
        print(f"{args.src}: not a directory", file=sys.stderr)
        return 2
    count = 0
    for d in class_dirs(args.src):
        name = "__".join(d.relative_to(args.src).parts) or d.name
        out_dir = args.dst / name
        out_dir.mkdir(parents=True, exist_ok=True)
        for f in sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in SUFFIXES):
            img = Image.open(f).convert("L" if args.gray else "RGB")
            if args.size:
                img = img.resize((args.size, args.size), Image.BILINEAR)
            if args.invert:
                img = Image.eval(img, lambda v: 255 - v)
            img.save(out_dir / (f.stem + (".pgm" if args.gray else ".ppm")))
            count += 1
    print(f"wrote {count} images", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
