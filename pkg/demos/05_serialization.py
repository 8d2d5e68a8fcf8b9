#!/usr/bin/env python3
"""
The shared space on disk.

A trained space serializes to a single binary file: a 16-byte header
(magic, version, flags, layer count), a geometry block, the cumulative
rank table, the factor payload as little-endian float32 columns, and the
task heads. Everything is validated before any model object is built, so
a truncated file refuses to load rather than yielding a partial model.
"""

import os
import tempfile

import numpy as np

import factorcl as fc
from factorcl import checkpoint as ck
from factorcl.errors import FormatError

STREAM = fc.TaskStreamSpec(
    kind="synthetic_blobs",
    tasks=2,
    classes_per_task=2,
    samples_per_class=120,
    input_shape=(2, 6, 6),
    seed=5,
    overlap=0.1,
    scale=3.0,
)
NET = fc.NetworkSpec.build((6, 6), in_channels=2, input_hw=(6, 6))
CFG = fc.TrainConfig(epochs=40, batch_size=32, lr_drop_epochs=(25, 35),
                     lambda_sparse=0.5, energy_e=1e-2, seed=5)


def main():
    stream = fc.generate_stream(STREAM)
    space, report = fc.run_continual(stream, NET, CFG)

    blob = ck.space_to_bytes(space)
    n_params = fc.param_count(space)
    L = NET.num_layers
    T = space.num_tasks
    metadata = 16 * L + 8 * L + 12 + 4 + 4 * L * T + 8 * T
    print(f"file size {len(blob)} bytes = 16 header + {metadata} metadata "
          f"+ 4 x {n_params} reals")
    assert len(blob) == 16 + metadata + 4 * n_params

    print("header bytes:", blob[:16].hex(" "), f"(magic {blob[:4]!r})")

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "space.cacl")
        ck.save_space(path, space)
        loaded = ck.load_space(path)

        # bitwise round trip: the re-serialized bytes match, and so do logits
        assert ck.space_to_bytes(loaded) == blob
        for t, data in enumerate(stream, start=1):
            a = fc.predict_logits(space, t, data.test_x)
            b = fc.predict_logits(loaded, t, data.test_x)
            assert np.array_equal(a, b)
        print("round trip: bytes and all task logits bitwise identical")

        # truncation is refused with a byte offset, never a partial model
        with open(path, "wb") as fh:
            fh.write(blob[: len(blob) // 2])
        try:
            ck.load_space(path)
        except FormatError as exc:
            print(f"truncated file refused: {exc}")


if __name__ == "__main__":
    main()
