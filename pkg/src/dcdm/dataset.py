"""Class table, dataset manifest, deterministic splitting, and batching.

The 25-class table below is the single source of truth for class
indices, names, and directory slugs: every class index used anywhere in
the package resolves through it. Six plants, six healthy classes, and
the reference per-class image counts ride along for context.

A manifest is a flat list of records (relative path, class index, split
tag, group id) persisted as diff-friendly CSV with a `#seed=` comment
header. Splitting is stratified per class and seeded; group-aware mode
additionally keeps all shots of the same leaf (shared group id) on one
side of the split.
"""

from __future__ import annotations

import csv
import re
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import imaging
from .errors import DatasetError

SPLIT_TAGS = ("train", "test", "unassigned")
DEFAULT_GROUP_REGEX = r"^([^_]+)"

# index, plant, plant botanical, disease, disease botanical,
# healthy?, training images, validation images, slug
_CLASS_ROWS = (
    (0, "Apple", "Malus Domestica", "Scab", "Venturia inaequalis",
     False, 1504, 326, "apple_scab"),
    (1, "Apple", "Malus Domestica", "Black rot", "Botryosphaeria obtusa",
     False, 1496, 325, "apple_black_rot"),
    (2, "Apple", "Malus Domestica", "Cedar apple rust",
     "Gymnosporangium juniperivirginianae", False, 1220, 455,
     "apple_cedar_apple_rust"),
    (3, "Apple", "Malus Domestica", "", "", True, 1395, 329, "apple_healthy"),
    (4, "Grapes", "Vitis vinifera", "Black rot", "Guignardia bidwellii",
     False, 1944, 236, "grapes_black_rot"),
    (5, "Grapes", "Vitis vinifera", "Esca", "Phaeomoniella chlamydospora",
     False, 1107, 276, "grapes_esca"),
    (6, "Grapes", "Vitis vinifera", "Leaf blight", "Pseudocercospora vitis",
     False, 1860, 215, "grapes_leaf_blight"),
    (7, "Grapes", "Vitis vinifera", "", "", True, 1339, 484, "grapes_healthy"),
    (8, "Peach", "Prunus persica", "Bacterial spot", "Xanthomonas campestris",
     False, 1838, 459, "peach_bacterial_spot"),
    (9, "Peach", "Prunus persica", "", "", True, 1288, 572, "peach_healthy"),
    (10, "Potato", "Solanum tuberosum", "Early blight", "Alternaria solani",
     False, 1800, 200, "potato_early_blight"),
    (11, "Potato", "Solanum tuberosum", "Late blight", "Phytophthora infestans",
     False, 1800, 200, "potato_late_blight"),
    (12, "Potato", "Solanum tuberosum", "", "", True, 1121, 531, "potato_healthy"),
    (13, "Strawberry", "Fragaria spp.", "Leaf scorch", "Diplocarpon earlianum",
     False, 1887, 350, "strawberry_leaf_scorch"),
    (14, "Strawberry", "Fragaria spp.", "", "", True, 1364, 492,
     "strawberry_healthy"),
    (15, "Tomato", "Lycopersicum esculentum", "Bacterial spot",
     "Xanthomonas campestris pv. Vesicatoria", False, 1710, 425,
     "tomato_bacterial_spot"),
    (16, "Tomato", "Lycopersicum esculentum", "Early blight",
     "Alternaria solani", False, 1800, 457, "tomato_early_blight"),
    (17, "Tomato", "Lycopersicum esculentum", "Late blight",
     "Phytophthora infestans", False, 1527, 382, "tomato_late_blight"),
    (18, "Tomato", "Lycopersicum esculentum", "Leaf mold", "Fulvia fulva",
     False, 1761, 491, "tomato_leaf_mold"),
    (19, "Tomato", "Lycopersicum esculentum", "Septoria leaf spot",
     "Septoria lycopersici", False, 1417, 454, "tomato_septoria_leaf_spot"),
    (20, "Tomato", "Lycopersicum esculentum", "Spider mites",
     "Tetranychus urticae", False, 1340, 335, "tomato_spider_mites"),
    (21, "Tomato", "Lycopersicum esculentum", "Target spot",
     "Corynespora cassiicola", False, 1123, 481, "tomato_target_spot"),
    (22, "Tomato", "Lycopersicum esculentum", "Leaf curl virus", "",
     False, 3286, 571, "tomato_leaf_curl_virus"),
    (23, "Tomato", "Lycopersicum esculentum", "Mosaic virus",
     "Tomato mosaic virus", False, 1800, 574, "tomato_mosaic_virus"),
    (24, "Tomato", "Lycopersicum esculentum", "", "", True, 1273, 380,
     "tomato_healthy"),
)


@dataclass(frozen=True)
class ClassEntry:
    index: int
    plant: str
    plant_botanical: str
    disease: str  # empty for healthy classes
    disease_botanical: str
    is_healthy: bool
    train_images: int
    val_images: int
    slug: str

    @property
    def display_name(self) -> str:
        return f"{self.plant} (Healthy)" if self.is_healthy \
            else f"{self.plant} {self.disease}"


_TABLE = tuple(ClassEntry(*row) for row in _CLASS_ROWS)
_SLUG_TO_INDEX = {e.slug: e.index for e in _TABLE}


def class_table() -> list:
    """All 25 classes in index order."""
    return list(_TABLE)


def class_slugs() -> list:
    return [e.slug for e in _TABLE]


def slug_to_index(slug: str) -> int:
    try:
        return _SLUG_TO_INDEX[slug]
    except KeyError:
        raise DatasetError(f"unknown class slug {slug!r}") from None


@dataclass(frozen=True)
class ManifestRecord:
    path: str  # relative to the dataset root
    class_index: int
    split: str = "unassigned"
    group_id: str = ""

    def __post_init__(self):
        if not self.path:
            raise DatasetError("manifest record needs a non-empty path")
        if not 0 <= self.class_index < len(_TABLE):
            raise DatasetError(
                f"class index {self.class_index} outside 0..{len(_TABLE) - 1}")
        if self.split not in SPLIT_TAGS:
            raise DatasetError(f"bad split tag {self.split!r}")


@dataclass
class DatasetManifest:
    records: list
    seed: Optional[int] = None  # split seed, None before splitting
    skipped: int = 0  # undecodable files dropped during the scan

    def counts(self) -> dict:
        out = {tag: 0 for tag in SPLIT_TAGS}
        for rec in self.records:
            out[rec.split] += 1
        return out

    def by_split(self, tag: str) -> list:
        if tag not in SPLIT_TAGS:
            raise DatasetError(f"bad split tag {tag!r}")
        return [rec for rec in self.records if rec.split == tag]


def group_id_for(filename: str, group_regex: str = DEFAULT_GROUP_REGEX) -> str:
    """Grouping key for a file: regex group 1 over the stem, else the stem.

    The default regex takes the prefix before the first underscore, the
    usual convention for multiple shots of one leaf.
    """
    stem = Path(filename).stem
    m = re.match(group_regex, stem)
    if m and m.groups() and m.group(1):
        return m.group(1)
    return stem


def build_manifest(root_dir, group_regex: str = DEFAULT_GROUP_REGEX) -> DatasetManifest:
    """Scan root/<class-slug>/<files> into a manifest.

    Every file is actually decoded; undecodable ones are skipped and
    counted in manifest.skipped. Subdirectories that are not known class
    slugs are an error.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    unknown = [p.name for p in class_dirs if p.name not in _SLUG_TO_INDEX]
    if unknown:
        raise DatasetError(
            f"unknown class directories under {root}: {', '.join(sorted(unknown))}")
    if not class_dirs:
        raise DatasetError(f"dataset root {root} has no class directories")
    records = []
    skipped = 0
    for cdir in class_dirs:
        cidx = _SLUG_TO_INDEX[cdir.name]
        for f in sorted(p for p in cdir.iterdir() if p.is_file()):
            try:
                imaging.decode_image(f.read_bytes())
            except Exception:
                skipped += 1
                continue
            records.append(ManifestRecord(
                path=str(f.relative_to(root)),
                class_index=cidx,
                group_id=group_id_for(f.name, group_regex),
            ))
    if not records:
        raise DatasetError(f"no decodable images found under {root}")
    return DatasetManifest(records=records, skipped=skipped)


def _class_cut(n: int, fraction: float) -> int:
    # round-half-up keeps each class within half a record of the fraction
    return int(np.floor(n * fraction + 0.5))


def split(
    manifest: DatasetManifest,
    train_fraction: float,
    seed: int = 0,
    group_aware: bool = False,
) -> DatasetManifest:
    """Assign every record to train or test, stratified per class.

    Each class is shuffled with its own rng seeded by (seed, class index)
    and cut at the fraction. In group-aware mode whole groups are dealt
    to the train side until the class quota is met; a class with fewer
    than two records cannot be split and goes entirely to train (with a
    warning).
    """
    if not 0.0 < train_fraction < 1.0:
        raise DatasetError(
            f"train fraction must be in (0, 1), got {train_fraction}")
    if not manifest.records:
        raise DatasetError("cannot split an empty manifest")
    assignment = {}
    for cidx in sorted({rec.class_index for rec in manifest.records}):
        members = [i for i, rec in enumerate(manifest.records)
                   if rec.class_index == cidx]
        rng = np.random.default_rng([seed, cidx])
        if len(members) < 2 and group_aware:
            warnings.warn(
                f"class {cidx} has {len(members)} record(s); "
                "assigning all of them to train")
            for i in members:
                assignment[i] = "train"
            continue
        quota = _class_cut(len(members), train_fraction)
        if group_aware:
            groups = {}
            for i in members:
                groups.setdefault(manifest.records[i].group_id, []).append(i)
            keys = sorted(groups)
            rng.shuffle(keys)
            placed = 0
            for key in keys:
                tag = "train" if placed < quota else "test"
                for i in groups[key]:
                    assignment[i] = tag
                if tag == "train":
                    placed += len(groups[key])
        else:
            order = np.array(members)
            rng.shuffle(order)
            for pos, i in enumerate(order):
                assignment[int(i)] = "train" if pos < quota else "test"
    new_records = [replace(rec, split=assignment[i])
                   for i, rec in enumerate(manifest.records)]
    return DatasetManifest(records=new_records, seed=seed,
                           skipped=manifest.skipped)


def batches(
    manifest: DatasetManifest,
    split_tag: str,
    batch_size: int,
    shuffle_seed: int,
    epoch_index: int,
) -> list:
    """Chunk a split into batches in a seeded per-epoch order.

    The permutation is seeded by shuffle_seed XOR epoch_index, so every
    (seed, epoch) pair has one well-defined order regardless of how many
    workers later consume the batches. The last batch may be short.
    """
    if batch_size < 1:
        raise DatasetError(f"batch size must be >= 1, got {batch_size}")
    members = manifest.by_split(split_tag)
    if not members:
        raise DatasetError(f"split {split_tag!r} is empty")
    order = np.random.default_rng(shuffle_seed ^ epoch_index).permutation(
        len(members))
    return [[members[i] for i in order[s : s + batch_size]]
            for s in range(0, len(members), batch_size)]


# -- persistence -----------------------------------------------------------------


def save_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", newline="") as f:
        f.write(f"#seed={'' if manifest.seed is None else manifest.seed}\n")
        writer = csv.writer(f)
        writer.writerow(["path", "class_index", "split", "group_id"])
        for rec in manifest.records:
            writer.writerow([rec.path, rec.class_index, rec.split, rec.group_id])


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"manifest {path} does not exist")
    with open(path, newline="") as f:
        first = f.readline().strip()
        if not first.startswith("#seed="):
            raise DatasetError(f"{path.name}: missing #seed= header line")
        seed_text = first[len("#seed="):]
        seed = int(seed_text) if seed_text else None
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["path", "class_index", "split", "group_id"]:
            raise DatasetError(f"{path.name}: unexpected column header {header}")
        records = []
        for row in reader:
            if not row:
                continue
            if len(row) != 4:
                raise DatasetError(f"{path.name}: malformed row {row}")
            records.append(ManifestRecord(
                path=row[0], class_index=int(row[1]),
                split=row[2], group_id=row[3]))
    return DatasetManifest(records=records, seed=seed)


def load_images(
    manifest: DatasetManifest,
    root,
    split_tag: str,
    input_hw: tuple,
):
    """Decode, register, and stack one split into (x, y) training arrays."""
    members = manifest.by_split(split_tag)
    if not members:
        raise DatasetError(f"split {split_tag!r} is empty")
    root = Path(root)
    xs = np.empty((len(members), 3, input_hw[0], input_hw[1]), dtype=np.float32)
    ys = np.empty(len(members), dtype=np.int64)
    for i, rec in enumerate(members):
        img = imaging.decode_image((root / rec.path).read_bytes())
        xs[i] = imaging.to_tensor(imaging.register(img, input_hw))
        ys[i] = rec.class_index
    return xs, ys
