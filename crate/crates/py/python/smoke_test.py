"""Smoke test for the mapseries extension module.

Build and install first, e.g. `maturin develop --release` in crates/py, then
run `python python/smoke_test.py`.
"""

import os
import random
import sys
import tempfile

import mapseries as ms


def random_tile(rng, size):
    return ms.Tile(size, bytes(rng.randrange(256) for _ in range(size * size * 3)))


def check_geometry():
    c = ms.TileCoord(13, 7282, 3224)
    kids = c.children()
    assert [k.quadrant() for k in kids] == [0, 1, 2, 3]
    assert all(k.parent() == c for k in kids)
    assert len({c, ms.TileCoord(13, 7282, 3224)}) == 1
    try:
        ms.TileCoord(2, 4, 0)
    except ValueError:
        pass
    else:
        raise AssertionError("out-of-range coordinate accepted")

    a = ms.Tile.filled(2, (0, 0, 0))
    b = ms.Tile.filled(2, (255, 255, 255))
    merged = ms.merge_downsample([a, a, b, b])
    assert merged.pixel(0, 0) == (0, 0, 0)
    assert merged.pixel(0, 1) == (255, 255, 255)
    assert ms.Tile.from_png(merged.to_png()) == merged


def check_metrics():
    rng = random.Random(3)
    t = random_tile(rng, 32)
    u = random_tile(rng, 32)
    assert abs(ms.ssim(t, t) - 1.0) < 1e-12
    assert abs(ms.essi(t, t) - 1.0) < 1e-12
    assert ms.ssim(t, u) < 0.5

    assert abs(ms.emd([1.0, 0.0, 0.0], [0.0, 0.0, 1.0]) - 2 / 255) < 1e-15
    h = ms.pixel_histogram([t, u])
    assert len(h) == 3 and all(abs(sum(c) - 1.0) < 1e-9 for c in h)

    p = ms.Palette.standard()
    projected = ms.palette_project(t, p)
    colors = {rgb for _, rgb in p.entries()}
    assert all(projected.pixel(x, y) in colors for x in range(32) for y in range(32))
    mask = ms.label_map(projected, p)
    assert ms.iou(mask, mask, "road") in (1.0, None)
    empty = ms.label_map(ms.Tile.filled(4, (242, 239, 233)), p)
    assert ms.iou(empty, empty, "water") is None


def check_aggregation():
    series = [(17, 0.6164), (16, 0.6731), (15, 0.5720), (14, 0.4605), (13, 0.4941)]
    parallel = [(17, 0.6164), (16, 0.5821), (15, 0.5884), (14, 0.4037), (13, 0.4123)]
    percent, zooms, warnings = ms.aggregate_improvement(series, parallel, "ssim")
    assert percent == 11.69, percent
    assert zooms == [16, 15, 14, 13]
    assert warnings == []

    csv = "zoom,strategy,ssim,essi,iou_road,iou_water\n" + "".join(
        f"{z},series,{s},,,\n{z},parallel,{q},,,\n" for (z, s), (_, q) in zip(series, parallel)
    )
    assert ms.report_improvements(csv) == {"ssim": 11.69}
    assert ms.report_svg(csv).count("<polyline") == 2


def check_frames():
    payload = ms.Tile.filled(8, (1, 2, 3)).to_png()
    stream = ms.encode_frame(payload) + ms.encode_frame(b"")
    assert stream[:4] == len(payload).to_bytes(4, "big")
    assert ms.decode_frames(stream) == [payload, b""]
    assert ms.PROTOCOL_VERSION == 1


def check_translate():
    with tempfile.TemporaryDirectory() as root:
        corpus = os.path.join(root, "corpus")
        rng = random.Random(9)
        lines = ["#city\tkind\tzoom\tx\ty\tsplit\tchecksum\tpath"]
        import hashlib

        for y in range(2):
            for x in range(2):
                png = random_tile(rng, 8).to_png()
                rel = f"rsi/16/{100 + x}/{200 + y}.png"
                path = os.path.join(corpus, "tokyo", rel)
                os.makedirs(os.path.dirname(path), exist_ok=True)
                with open(path, "wb") as f:
                    f.write(png)
                digest = hashlib.sha256(png).hexdigest()
                lines.append(f"tokyo\trsi\t16\t{100 + x}\t{200 + y}\ttest\t{digest}\t{rel}")
        with open(os.path.join(corpus, "manifest.tsv"), "w") as f:
            f.write("\n".join(lines) + "\n")
        config = os.path.join(root, "run.toml")
        with open(config, "w") as f:
            f.write(
                '[corpus]\nroot = "corpus"\ntile_size = 8\n'
                '[strategy]\nkind = "series"\ntop_zoom = 16\nbottom_zoom = 15\n'
                '[registry]\ndefault = { backend = "identity" }\n'
                '[output]\ndir = "out"\n'
            )
        run_dir = ms.translate(config, workers=2)
        assert os.path.isfile(os.path.join(run_dir, "summary.json"))
        assert os.path.isfile(os.path.join(run_dir, "tokyo", "map", "15", "50", "100.png"))


def main():
    for check in (check_geometry, check_metrics, check_aggregation, check_frames, check_translate):
        check()
        print(f"ok {check.__name__}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
