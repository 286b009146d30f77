"""Writes the bundled procedural PBR material used by tests and examples.

Every map derives from one height field of irregular stone tiles, so the
channels share spatial features the way scanned materials do:
albedo, normal, roughness, metalness and ambient occlusion (9 channels).

    python tools/make_sample_material.py [--size 128] [--seed 7] [--out assets/sample_material]
"""

import argparse
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage


def height_field(size, rng):
    # Voronoi cells with a wrap-around distance give seamless stone tiles.
    points = rng.uniform(0, size, (24, 2))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dists = []
    for py, px in points:
        dy = np.minimum(np.abs(yy - py), size - np.abs(yy - py))
        dx = np.minimum(np.abs(xx - px), size - np.abs(xx - px))
        dists.append(np.hypot(dy, dx))
    dists = np.stack(dists)
    cell = np.argmin(dists, axis=0)
    nearest = np.sort(dists, axis=0)
    edge = nearest[1] - nearest[0]
    stone = np.clip(edge / 4.0, 0.0, 1.0) ** 0.5
    grain = ndimage.gaussian_filter(rng.normal(size=(size, size)), 1.5, mode="wrap")
    grain /= np.abs(grain).max()
    return np.clip(0.85 * stone + 0.15 * grain, 0.0, 1.0), cell


def to_u8(values):
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--size", type=int, default=128)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--out", type=Path, default=Path(__file__).resolve().parent.parent / "assets" / "sample_material")
    args = parser.parse_args()
    rng = np.random.default_rng(args.seed)
    size = args.size

    height, cell = height_field(size, rng)
    tint = rng.uniform(0.0, 1.0, (cell.max() + 1, 3))
    base = np.array([0.55, 0.47, 0.40]) + 0.15 * (tint[cell] - 0.5)
    mortar = np.array([0.32, 0.30, 0.28])
    albedo = height[..., None] * base + (1.0 - height[..., None]) * mortar

    gy, gx = np.gradient(height * 4.0)
    normal = np.stack([-gx, -gy, np.ones_like(height)], axis=-1)
    normal /= np.linalg.norm(normal, axis=-1, keepdims=True)
    normal = 0.5 * normal + 0.5

    roughness = 0.9 - 0.45 * height
    metalness = (tint[cell][..., 0] > 0.9) * height * 0.8
    ao = np.clip(ndimage.uniform_filter(height, 7, mode="wrap") * 0.6 + 0.4 * height + 0.1, 0.0, 1.0)

    args.out.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_u8(albedo), "RGB").save(args.out / "albedo.png")
    Image.fromarray(to_u8(normal), "RGB").save(args.out / "normal.png")
    for name, plane in [("roughness", roughness), ("metalness", metalness), ("ao", ao)]:
        Image.fromarray(to_u8(plane), "L").save(args.out / f"{name}.png")
    (args.out / "manifest.toml").write_text(
        "bit_depth = 8\n\n[maps]\n"
        'albedo = { path = "albedo.png", channels = 3 }\n'
        'normal = { path = "normal.png", channels = 3 }\n'
        'roughness = { path = "roughness.png", channels = 1 }\n'
        'metalness = { path = "metalness.png", channels = 1 }\n'
        'ao = { path = "ao.png", channels = 1 }\n'
    )


if __name__ == "__main__":
    main()
