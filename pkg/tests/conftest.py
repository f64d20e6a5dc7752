import numpy as np
import pytest

CIFAR_CLASS_COUNT = 10


@pytest.fixture(scope="session")
def cifar_dir(tmp_path_factory):
    """Synthesized CIFAR-10 binary batches with a recognizable pixel pattern."""
    root = tmp_path_factory.mktemp("cifar")
    rng = np.random.default_rng(0)
    for name, offset in [(f"data_batch_{i}.bin", i) for i in range(1, 6)] + [
        ("test_batch.bin", 0)
    ]:
        records = np.empty((10000, 3073), dtype=np.uint8)
        records[:, 0] = (np.arange(10000) + offset) % CIFAR_CLASS_COUNT
        records[:, 1:] = rng.integers(0, 256, size=(10000, 3072), dtype=np.uint8)
        # pin the first record's first pixels to the map's endpoints
        records[0, 1] = 255
        records[0, 2] = 0
        (root / name).write_bytes(records.tobytes())
    return root
