"""Dataset disk format: one ``.qt`` blob per sample plus ``labels.csv``
(filename,label rows).  A generated dataset root holds ``train/`` and
``eval/`` split directories."""

from __future__ import annotations

import csv
import os

import numpy as np

from .errors import ValidationError
from .nnexec import Dataset
from .tensor import load_tensor, save_tensor


def save_dataset(ds: Dataset, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for i in range(len(ds)):
        fname = f"{i:05d}.qt"
        save_tensor(np.ascontiguousarray(ds.x[i], dtype=np.float32),
                    os.path.join(out_dir, fname))
        rows.append((fname, int(ds.y[i])))
    with open(os.path.join(out_dir, "labels.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["filename", "label"])
        w.writerows(rows)


def load_dataset(path, class_count=None) -> Dataset:
    labels_path = os.path.join(path, "labels.csv")
    if not os.path.exists(labels_path):
        raise ValidationError(f"{path!r} has no labels.csv")
    xs, ys = [], []
    with open(labels_path, newline="") as fh:
        for row in csv.DictReader(fh):
            xs.append(load_tensor(os.path.join(path, row["filename"])))
            ys.append(int(row["label"]))
    if not xs:
        raise ValidationError(f"dataset at {path!r} is empty")
    y = np.asarray(ys, dtype=np.int64)
    return Dataset(x=np.stack(xs).astype(np.float32), y=y,
                   class_count=class_count or int(y.max()) + 1)
