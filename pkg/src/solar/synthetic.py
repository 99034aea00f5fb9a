"""Procedural landmark-retrieval benchmark.

Each class is a fixed pair of coloured oriented gratings (the "landmark")
pasted into a random region of a cluttered background made of gratings from a
shared bank. Query/database views come in three flavours that mirror the
easy/hard/junk structure of revisited retrieval ground truth:

* easy: large landmark region, mild brightness jitter
* hard: small landmark region, strong jitter, partial occlusion
* junk: landmark half covered by clutter

Pixels are quantised to 8 bits so a dataset written to PPM files reads back
identically.
"""

import csv
import os
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .evaluation import QueryGroundTruth, RetrievalGroundTruth, load_ground_truth
from .imageio import read_image, write_image

CLUTTER_BANK = 24
QUERIES_PER_CLASS = 2
CONTRAST = 0.22
CLUTTER_CONTRAST = 0.12


@dataclass
class Benchmark:
    train_images: list
    train_labels: np.ndarray
    train_ids: list
    query_images: list
    query_ids: list
    db_images: list
    db_ids: list
    db_labels: np.ndarray
    gt: RetrievalGroundTruth

    @property
    def n_classes(self):
        return len(set(self.train_labels.tolist()))


def _grating(rng, freq_range=(0.06, 0.3)):
    return {
        "freq": rng.uniform(*freq_range),
        "theta": rng.uniform(0, np.pi),
        "color": rng.uniform(-1, 1, size=3),
    }


def _render(gratings, size, rng, contrast=CONTRAST):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size, 3))
    for g in gratings:
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * g["freq"] * (xx * np.cos(g["theta"]) + yy * np.sin(g["theta"])) + phase)
        img += contrast * wave[..., None] * g["color"]
    return img


def _view(cls_gratings, bank, size, rng, kind, clutter=CLUTTER_CONTRAST):
    """Render one image of a class; returns ``(pixels, landmark box)``."""
    background = 0.5 + _render([bank[i] for i in rng.choice(len(bank), 2, replace=False)], size, rng,
                               clutter)
    frac = {"easy": (0.6, 0.8), "hard": (0.4, 0.55), "junk": (0.6, 0.8)}[kind]
    side = int(round(size * rng.uniform(*frac)))
    y0, x0 = rng.integers(0, size - side + 1, size=2)
    landmark = 0.5 + _render(cls_gratings, size, rng)
    img = background.copy()
    img[y0:y0 + side, x0:x0 + side] = landmark[y0:y0 + side, x0:x0 + side]
    if kind == "hard":
        occ = side // 3
        oy, ox = y0 + rng.integers(0, side - occ + 1), x0 + rng.integers(0, side - occ + 1)
        img[oy:oy + occ, ox:ox + occ] = background[oy:oy + occ, ox:ox + occ]
    elif kind == "junk":
        half = side // 2
        if rng.random() < 0.5:
            img[y0:y0 + side, x0:x0 + half] = background[y0:y0 + side, x0:x0 + half]
        else:
            img[y0:y0 + half, x0:x0 + side] = background[y0:y0 + half, x0:x0 + side]
    jitter = 0.05 if kind == "easy" else 0.2
    img = img * rng.uniform(1 - jitter, 1 + jitter) + rng.uniform(-jitter, jitter) / 2
    img = np.round(np.clip(img, 0, 1) * 255) / 255
    return img, (int(x0), int(y0), int(x0 + side), int(y0 + side))


def _query_box(box, size, min_side):
    x0, y0, x1, y1 = box
    side = max(x1 - x0, min_side)
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    nx0 = int(np.clip(round(cx - side / 2), 0, size - side))
    ny0 = int(np.clip(round(cy - side / 2), 0, size - side))
    return [nx0, ny0, nx0 + side, ny0 + side]


def generate_synthetic_benchmark(n_classes=8, per_class=20, image_size=64, seed=0,
                                 clutter=CLUTTER_CONTRAST):
    """Build a benchmark; per class, half the images train and the rest form
    ``QUERIES_PER_CLASS`` queries plus an easy/hard/junk database split."""
    if n_classes < 2 or per_class < 3:
        raise ValidationError("need n_classes >= 2 and per_class >= 3")
    if image_size < 32:
        raise ValidationError("image_size must be at least 32")
    rng = np.random.default_rng(seed)
    bank = [_grating(rng) for _ in range(CLUTTER_BANK)]
    classes = [[_grating(rng), _grating(rng)] for _ in range(n_classes)]
    min_side = min(image_size, max(32, int(np.ceil(32 * np.sqrt(2)))))

    n_train = max(1, per_class // 2)
    n_query = min(QUERIES_PER_CLASS, per_class - n_train - 1)
    n_db = per_class - n_train - n_query
    # database split: roughly 40% easy, 40% hard, rest junk
    n_easy = max(1, int(round(0.4 * n_db)))
    n_hard = max(0, min(n_db - n_easy, int(round(0.4 * n_db))))
    db_kinds = ["easy"] * n_easy + ["hard"] * n_hard + ["junk"] * (n_db - n_easy - n_hard)

    bench = Benchmark([], [], [], [], [], [], [], [], None)
    class_db = {}
    for c, gratings in enumerate(classes):
        for i in range(n_train):
            img, _ = _view(gratings, bank, image_size, rng, "hard" if i % 2 else "easy", clutter)
            bench.train_images.append(img)
            bench.train_labels.append(c)
            bench.train_ids.append(f"train_c{c:02d}_{i:03d}")
        class_db[c] = {"easy": [], "hard": [], "junk": []}
        for i, kind in enumerate(db_kinds):
            img, _ = _view(gratings, bank, image_size, rng, kind, clutter)
            did = f"db_c{c:02d}_{i:03d}"
            bench.db_images.append(img)
            bench.db_ids.append(did)
            bench.db_labels.append(c)
            class_db[c][kind].append(did)
    queries = []
    for c, gratings in enumerate(classes):
        for i in range(n_query):
            img, box = _view(gratings, bank, image_size, rng, "easy", clutter)
            qid = f"query_c{c:02d}_{i:03d}"
            bench.query_images.append(img)
            bench.query_ids.append(qid)
            queries.append(QueryGroundTruth(qid, _query_box(box, image_size, min_side),
                                            class_db[c]["easy"], class_db[c]["hard"],
                                            class_db[c]["junk"]))
    bench.train_labels = np.array(bench.train_labels)
    bench.db_labels = np.array(bench.db_labels)
    bench.gt = RetrievalGroundTruth(queries)
    return bench


def save_benchmark(bench, root):
    """Write ``images/<id>.ppm``, ``manifest.csv`` (id,label,split) and ``gt.json``."""
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    rows = []
    q_labels = {q.id: int(q.id.split("_c")[1][:2]) for q in bench.gt.queries}
    for split, images, ids, labels in (
            ("train", bench.train_images, bench.train_ids, bench.train_labels.tolist()),
            ("query", bench.query_images, bench.query_ids, [q_labels[i] for i in bench.query_ids]),
            ("db", bench.db_images, bench.db_ids, bench.db_labels.tolist())):
        for img, iid, lab in zip(images, ids, labels):
            write_image(os.path.join(root, "images", f"{iid}.ppm"), img)
            rows.append((iid, lab, split))
    with open(os.path.join(root, "manifest.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "split"])
        writer.writerows(rows)
    with open(os.path.join(root, "gt.json"), "w") as fh:
        fh.write(bench.gt.to_json())


def load_benchmark(root):
    bench = Benchmark([], [], [], [], [], [], [], [], load_ground_truth(os.path.join(root, "gt.json")))
    with open(os.path.join(root, "manifest.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            img = read_image(os.path.join(root, "images", f"{row['id']}.ppm"))
            lab = int(row["label"])
            if row["split"] == "train":
                bench.train_images.append(img)
                bench.train_labels.append(lab)
                bench.train_ids.append(row["id"])
            elif row["split"] == "query":
                bench.query_images.append(img)
                bench.query_ids.append(row["id"])
            else:
                bench.db_images.append(img)
                bench.db_ids.append(row["id"])
                bench.db_labels.append(lab)
    bench.train_labels = np.array(bench.train_labels)
    bench.db_labels = np.array(bench.db_labels)
    return bench
