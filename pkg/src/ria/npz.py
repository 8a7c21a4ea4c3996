"""npz writing with pinned zip timestamps.

np.savez stamps each archive member with the current time, so two otherwise
identical runs produce different bytes. Checkpoints and exported arrays are
part of the reproducibility contract, so they are written through this helper
instead; np.load reads the result like any other npz file.
"""

from __future__ import annotations

import io
import zipfile

import numpy as np

_EPOCH = (1980, 1, 1, 0, 0, 0)  # earliest time the zip format can represent


def write_npz(path, **arrays) -> None:
    """Equivalent of np.savez(path, **arrays) with deterministic bytes."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zipf:
        for name, value in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asanyarray(value), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=_EPOCH)
            zipf.writestr(info, buf.getvalue())
