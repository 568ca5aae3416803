"""Smoke test for the evrecon_py extension.

Build it first, e.g. `maturin develop -m crates/python/Cargo.toml --release`,
or `cargo build --release -p evrecon-py` and put target/release/libevrecon_py.so
on the path as evrecon_py.so.
"""

import os
import sys
import tempfile

import evrecon_py as ev


def main():
    seq = ev.simulate(width=32, height=32, duration=0.2, seed=3)
    stream = seq.events
    assert len(stream) > 0, "simulator produced no events"
    assert (stream.width, stream.height) == (32, 32)
    assert len(seq.gt_frames) == len(seq.gt_times)

    grid = stream.voxel_grid(5)
    assert len(grid) == 5 * 32 * 32
    assert abs(sum(grid) - stream.polarity_sum()) < 1e-6 * max(1, len(stream))

    with tempfile.TemporaryDirectory() as tmp:
        for name in ("events.txt", "events.evb"):
            path = os.path.join(tmp, name)
            stream.write(path)
            back = ev.EventStream.read(path)
            assert len(back) == len(stream), name

        model = ev.Model(num_encoders=2, num_residual=1, base_channels=4, seed=0)
        ckpt = os.path.join(tmp, "model.e2v")
        model.save(ckpt)
        model = ev.Model.load(ckpt)

    n = max(1, len(stream) // 4)
    frames = model.reconstruct(stream, window_count=n)
    assert frames, "no frames"
    ts = [t for t, _ in frames]
    assert ts == sorted(ts)
    w, h, data = frames[0][1]
    assert (w, h) == (32, 32) and min(data) >= 0.0 and max(data) <= 1.0

    same = model.reconstruct_hfr(stream, n, n)
    assert [f[0] for f in same] == ts

    gt = seq.gt_frames[0]
    assert ev.ssim(gt, gt) == 1.0 and ev.mse(gt, gt) == 0.0
    print(f"ok: {stream!r}, {model!r}, {len(frames)} frames, first-frame SSIM vs gt "
          f"{ev.ssim(frames[0][1], gt):.3f}")


if __name__ == "__main__":
    try:
        main()
    except AssertionError as e:
        print(f"smoke test failed: {e}", file=sys.stderr)
        sys.exit(1)
