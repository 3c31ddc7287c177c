#!/usr/bin/env python3
"""Writes the per-row distress count fixture under tests/fixtures/distress_counts/.

Type counts and severity counts are reproduced row by row; annotations beyond
the severity total carry a null severity.
"""
import json
import pathlib
import random
import struct
import zlib

TYPE_COUNTS = {"alligator": 481, "block": 265, "longitudinal": 903, "patch": 138, "transverse": 604}
SEVERITY_COUNTS = {"low": 178, "medium": 1466, "high": 509}
N_IMAGES = 10
SIZE = 64
FOOTPRINT_MM = 3200.0


def png_bytes(width, height, value):
    raw = b"".join(b"\x00" + bytes([value]) * width for _ in range(height))
    def chunk(tag, data):
        body = tag + data
        return struct.pack(">I", len(data)) + body + struct.pack(">I", zlib.crc32(body) & 0xFFFFFFFF)
    ihdr = struct.pack(">IIBBBBB", width, height, 8, 0, 0, 0, 0)
    return b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr) + chunk(b"IDAT", zlib.compress(raw, 9)) + chunk(b"IEND", b"")


def main():
    root = pathlib.Path(__file__).resolve().parent / "distress_counts"
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    rng = random.Random(1)
    types = [t for t, n in TYPE_COUNTS.items() for _ in range(n)]
    severities = [s for s, n in SEVERITY_COUNTS.items() for _ in range(n)]
    severities += [None] * (len(types) - len(severities))
    rng.shuffle(types)
    rng.shuffle(severities)
    images = [[] for _ in range(N_IMAGES)]
    for k, (t, s) in enumerate(zip(types, severities)):
        x = float(rng.randint(0, SIZE - 4))
        y = float(rng.randint(0, SIZE - 4))
        images[k % N_IMAGES].append({"type": t, "severity": s, "vertices": [[x, y], [x + 3.0, y], [x, y + 3.0]]})
    manifest = []
    for i, anns in enumerate(images):
        image_id = f"dc_{i:02d}"
        doc = {
            "image_id": image_id,
            "width_px": SIZE,
            "height_px": SIZE,
            "footprint_mm": [FOOTPRINT_MM, FOOTPRINT_MM],
            "annotations": anns,
            "pci_label": None,
        }
        (root / "annotations" / f"{image_id}.json").write_text(json.dumps(doc, separators=(",", ":")) + "\n")
        (root / "images" / f"{image_id}.png").write_bytes(png_bytes(SIZE, SIZE, 128))
        manifest.append(f"annotations/{image_id}.json")
    (root / "manifest.txt").write_text("\n".join(manifest) + "\n")


if __name__ == "__main__":
    main()
