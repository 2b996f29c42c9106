from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union
import gzip
import hashlib
import json
import logging
import math

import nibabel as nib
import numpy as np
import torch

from errors import ConfigError, DataError, FormatError, MissingInput, PlacementFailed, ShapeError

"""
Процедурные 3D-фантомы органов, разбиение корпуса, патчи и ввод-вывод NIfTI.

Оси массива (x, y, z), как в LPS:
    x растёт к левому боку пациента (right = меньше x),
    y растёт кзади (anterior = меньше y),
    z растёт к голове (superior = больше z).
"""

# направление → (ось, знак разности центроидов субъект − опора)
DIRECTIONS = {
    "right": (0, -1),
    "left": (0, 1),
    "anterior": (1, -1),
    "posterior": (1, 1),
    "inferior": (2, -1),
    "superior": (2, 1),
}
PRIMITIVES = ("ellipsoid", "tube", "l_solid")
NIFTI_MAGICS = (b"n+1\x00", b"ni1\x00")


@dataclass
class OrganSpec:
    name: str
    primitive: str
    size_range: Tuple[float, float]
    intensity_mean: float
    intensity_std: float = 0.1


@dataclass
class RelationSpec:
    subject: str
    reference: str
    direction: str


@dataclass
class PhantomSpec:
    organs: List[OrganSpec]
    relations: List[RelationSpec] = field(default_factory=list)
    grid: Tuple[int, int, int] = (64, 64, 64)
    background_mean: float = 0.0
    noise_std: float = 0.1
    seed: int = 0
    max_retries: int = 500

    @property
    def class_names(self) -> List[str]:
        return [o.name for o in self.organs]

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["grid"] = list(self.grid)
        for organ in data["organs"]:
            organ["size_range"] = list(organ["size_range"])
        return data

    def spec_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    def validate(self) -> "PhantomSpec":
        if len(self.grid) != 3 or any(g < 4 for g in self.grid):
            raise ConfigError(f"Некорректная сетка фантома: {self.grid}", key="grid")
        if not self.organs:
            raise ConfigError("В спецификации фантома нет органов", key="organs")
        names = self.class_names
        if len(set(names)) != len(names):
            raise ConfigError("Имена органов повторяются", key="organs")

        total = int(np.prod(self.grid))
        for organ in self.organs:
            lo, hi = organ.size_range
            if organ.primitive not in PRIMITIVES:
                raise ConfigError(f"Неизвестный примитив '{organ.primitive}'", key=organ.name)
            if not 0.0 < lo <= hi < 1.0:
                raise ConfigError(f"Некорректный диапазон размера у '{organ.name}': {organ.size_range}", key=organ.name)
            if (hi * total) ** (1.0 / 3.0) + 2 > min(self.grid):
                raise ConfigError(f"Орган '{organ.name}' не помещается в сетку {self.grid}", key=organ.name)
            if organ.intensity_std < 0:
                raise ConfigError(f"Отрицательное σ яркости у '{organ.name}'", key=organ.name)

        for relation in self.relations:
            if relation.subject not in names or relation.reference not in names:
                raise ConfigError(f"Связь ссылается на неизвестный орган: {relation}", key="relations")
            if relation.direction not in DIRECTIONS:
                raise ConfigError(f"Неизвестное направление '{relation.direction}'", key="relations")
            if relation.subject == relation.reference:
                raise ConfigError(f"Орган не может ссылаться на себя: {relation}", key="relations")
        placement_order(self)
        return self


def placement_order(spec: PhantomSpec) -> List[str]:
    """Топологический порядок: опорный орган размещается раньше субъекта. Цикл → ConfigError."""
    names = spec.class_names
    incoming = {name: set() for name in names}
    for relation in spec.relations:
        incoming[relation.subject].add(relation.reference)

    order: List[str] = []
    remaining = list(names)
    while remaining:
        ready = [name for name in remaining if incoming[name] <= set(order)]
        if not ready:
            raise ConfigError(f"Связи между органами содержат цикл: {remaining}", key="relations")
        order.append(ready[0])
        remaining.remove(ready[0])
    return order


def phantom_spec_from_dict(data: Dict[str, Any]) -> PhantomSpec:
    try:
        organs = [
            OrganSpec(
                name=o["name"],
                primitive=o["primitive"],
                size_range=tuple(float(v) for v in o["size_range"]),
                intensity_mean=float(o["intensity_mean"]),
                intensity_std=float(o.get("intensity_std", 0.1)),
            )
            for o in data["organs"]
        ]
        relations = [RelationSpec(**r) for r in data.get("relations", [])]
        spec = PhantomSpec(
            organs=organs,
            relations=relations,
            grid=tuple(int(g) for g in data.get("grid", (64, 64, 64))),
            background_mean=float(data.get("background_mean", 0.0)),
            noise_std=float(data.get("noise_std", 0.1)),
            seed=int(data.get("seed", 0)),
            max_retries=int(data.get("max_retries", 500)),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"Некорректная спецификация фантома: {e}", key="phantom_spec") from e
    return spec.validate()


def load_phantom_spec(path: Any) -> PhantomSpec:
    path = Path(path)
    if not path.exists():
        raise MissingInput(path, "спецификация фантома")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} не является JSON: {e}", key=str(path)) from e
    return phantom_spec_from_dict(data)


def default_phantom_spec() -> PhantomSpec:
    """Четыре органа 64³; надпочечник меньше 1% переднего плана."""
    return PhantomSpec(
        organs=[
            OrganSpec("liver", "ellipsoid", (0.055, 0.075), 1.0, 0.15),
            OrganSpec("stomach", "l_solid", (0.018, 0.028), 0.55, 0.15),
            OrganSpec("aorta", "tube", (0.005, 0.009), 1.6, 0.15),
            OrganSpec("right adrenal gland", "ellipsoid", (0.0004, 0.0006), 1.25, 0.15),
        ],
        relations=[
            RelationSpec("stomach", "liver", "left"),
            RelationSpec("aorta", "liver", "posterior"),
            RelationSpec("right adrenal gland", "aorta", "right"),
        ],
    ).validate()


# 🫁 Примитивы
def _box(center: np.ndarray, half: np.ndarray, grid: Tuple[int, int, int]) -> Optional[Tuple[slice, ...]]:
    lo = np.floor(center - half).astype(int)
    hi = np.ceil(center + half).astype(int) + 1
    if np.any(lo < 0) or np.any(hi > np.asarray(grid)):
        return None
    return tuple(slice(int(a), int(b)) for a, b in zip(lo, hi))


def _local_coords(box: Tuple[slice, ...]) -> List[np.ndarray]:
    return np.meshgrid(*[np.arange(s.start, s.stop, dtype=np.float64) for s in box], indexing="ij")


def _ellipsoid(volume: float, grid: Tuple[int, int, int], rng: np.random.Generator) -> Optional[np.ndarray]:
    ratios = rng.uniform(0.7, 1.3, size=3)
    scale = (volume / (4.0 / 3.0 * math.pi * np.prod(ratios))) ** (1.0 / 3.0)
    semi = scale * ratios
    center = np.array([rng.uniform(semi[i] + 1, grid[i] - semi[i] - 2) if grid[i] - 2 * semi[i] > 3 else -1.0 for i in range(3)])
    box = _box(center, semi, grid)
    if box is None:
        return None
    x, y, z = _local_coords(box)
    inside = ((x - center[0]) / semi[0]) ** 2 + ((y - center[1]) / semi[1]) ** 2 + ((z - center[2]) / semi[2]) ** 2 <= 1.0
    mask = np.zeros(grid, dtype=bool)
    mask[box] = inside
    return mask


def _tube(volume: float, grid: Tuple[int, int, int], rng: np.random.Generator) -> Optional[np.ndarray]:
    axis = int(rng.integers(3))
    aspect = rng.uniform(3.0, 6.0)
    radius = (volume / (math.pi * aspect)) ** (1.0 / 3.0)
    half = np.full(3, radius)
    half[axis] = aspect * radius / 2.0
    center = np.array([rng.uniform(half[i] + 1, grid[i] - half[i] - 2) if grid[i] - 2 * half[i] > 3 else -1.0 for i in range(3)])
    box = _box(center, half, grid)
    if box is None:
        return None
    coords = _local_coords(box)
    radial = sum(((coords[i] - center[i]) / radius) ** 2 for i in range(3) if i != axis)
    inside = (radial <= 1.0) & (np.abs(coords[axis] - center[axis]) <= half[axis])
    mask = np.zeros(grid, dtype=bool)
    mask[box] = inside
    return mask


def _l_solid(volume: float, grid: Tuple[int, int, int], rng: np.random.Generator) -> Optional[np.ndarray]:
    a1, a2 = (int(a) for a in rng.permutation(3)[:2])
    ratio = rng.uniform(2.5, 4.0)
    thickness = max(1, int(round((volume / (2 * ratio - 1)) ** (1.0 / 3.0))))
    arm = max(thickness + 1, int(round(ratio * thickness)))

    extent = np.full(3, thickness)
    extent[a1] = arm
    extent[a2] = arm
    if np.any(extent + 2 > np.asarray(grid)):
        return None
    origin = np.array([int(rng.integers(1, grid[i] - extent[i])) for i in range(3)])

    mask = np.zeros(grid, dtype=bool)
    first = [slice(origin[i], origin[i] + thickness) for i in range(3)]
    first[a1] = slice(origin[a1], origin[a1] + arm)
    second = [slice(origin[i], origin[i] + thickness) for i in range(3)]
    second[a2] = slice(origin[a2], origin[a2] + arm)
    mask[tuple(first)] = True
    mask[tuple(second)] = True
    return mask


PRIMITIVE_BUILDERS = {"ellipsoid": _ellipsoid, "tube": _tube, "l_solid": _l_solid}


def _relation_holds(relation: RelationSpec, centroids: Dict[str, np.ndarray]) -> bool:
    axis, sign = DIRECTIONS[relation.direction]
    diff = centroids[relation.subject][axis] - centroids[relation.reference][axis]
    return diff * sign > 0


def generate_phantom(spec: PhantomSpec, case_seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Возвращает (яркости float32, метки uint8) для одного случая."""
    rng = np.random.default_rng([spec.seed, case_seed])
    grid = tuple(spec.grid)
    total = float(np.prod(grid))
    class_ids = {name: i for i, name in enumerate(spec.class_names, start=1)}
    organs = {o.name: o for o in spec.organs}

    label = np.zeros(grid, dtype=np.uint8)
    centroids: Dict[str, np.ndarray] = {}
    for name in placement_order(spec):
        organ = organs[name]
        lo, hi = organ.size_range
        for _ in range(spec.max_retries):
            target = rng.uniform(lo + 0.15 * (hi - lo), hi - 0.15 * (hi - lo)) * total
            mask = PRIMITIVE_BUILDERS[organ.primitive](target, grid, rng)
            if mask is None or np.any(label[mask]):
                continue
            fraction = mask.sum() / total
            if not lo <= fraction <= hi:
                continue
            centroids[name] = np.argwhere(mask).mean(axis=0)
            relevant = [
                r for r in spec.relations
                if name in (r.subject, r.reference) and r.subject in centroids and r.reference in centroids
            ]
            if all(_relation_holds(r, centroids) for r in relevant):
                label[mask] = class_ids[name]
                break
            del centroids[name]
        else:
            raise PlacementFailed(name, spec.max_retries)

    means = np.array([spec.background_mean] + [o.intensity_mean for o in spec.organs], dtype=np.float64)
    stds = np.array([spec.noise_std] + [o.intensity_std for o in spec.organs], dtype=np.float64)
    image = means[label] + stds[label] * rng.standard_normal(grid)
    return image.astype(np.float32), label


# 🗂 Разбиение корпуса
@dataclass
class DatasetSplit:
    labeled: List[str]
    unlabeled: List[str]
    val: List[str]
    test: List[str]
    labeled_fraction: float

    def __post_init__(self) -> None:
        groups = [set(self.labeled), set(self.unlabeled), set(self.val), set(self.test)]
        if sum(len(g) for g in groups) != len(set().union(*groups)):
            raise DataError("Множества разбиения пересекаются")

    def split_of(self, case_id: str) -> str:
        for name in ("labeled", "unlabeled", "val", "test"):
            if case_id in getattr(self, name):
                return name
        raise KeyError(case_id)


def make_split(
    case_ids: Sequence[str],
    labeled_fraction: float,
    seed: int = 0,
    val_fraction: float = 24 / 360,
    test_fraction: float = 120 / 360,
) -> DatasetSplit:
    """Пропорции train/val/test как 216/24/120; размеченная доля считается от train."""
    if not 0.0 < labeled_fraction <= 1.0:
        raise ValueError(f"labeled_fraction вне (0, 1]: {labeled_fraction}")
    ids = list(case_ids)
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]

    n = len(shuffled)
    n_test = int(round(n * test_fraction))
    n_val = int(round(n * val_fraction))
    test, val, train = shuffled[:n_test], shuffled[n_test:n_test + n_val], shuffled[n_test + n_val:]
    if not train:
        raise DataError(f"Слишком мало случаев ({n}) для разбиения")
    n_labeled = max(1, int(round(labeled_fraction * len(train))))
    return DatasetSplit(
        labeled=sorted(train[:n_labeled]),
        unlabeled=sorted(train[n_labeled:]),
        val=sorted(val),
        test=sorted(test),
        labeled_fraction=labeled_fraction,
    )


# 💾 NIfTI
def _read_header_bytes(path: Path) -> bytes:
    opener = gzip.open if path.name.endswith(".gz") else open
    try:
        with opener(path, "rb") as handle:
            return handle.read(348)
    except OSError as e:
        raise FormatError(f"{path}: не удалось прочитать заголовок ({e})", path=str(path)) from e


def load_volume(path: Any) -> Tuple[np.ndarray, Tuple[float, float, float]]:
    path = Path(path)
    if not path.exists():
        raise MissingInput(path, "том NIfTI")

    header = _read_header_bytes(path)
    if len(header) < 348:
        raise FormatError(f"{path}: заголовок короче 348 байт", path=str(path))
    sizeof_hdr = (int.from_bytes(header[:4], "little"), int.from_bytes(header[:4], "big"))
    if 348 not in sizeof_hdr or header[344:348] not in NIFTI_MAGICS:
        raise FormatError(f"{path}: это не NIfTI-1 (неверная сигнатура)", path=str(path))

    try:
        image = nib.load(str(path))
        data = np.asanyarray(image.dataobj)
        zooms = image.header.get_zooms()[:3]
    except Exception as e:
        raise FormatError(f"{path}: повреждённый NIfTI ({e})", path=str(path)) from e
    return data, tuple(float(z) for z in zooms)


def save_volume(array: np.ndarray, path: Any, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    array = np.asarray(array)
    affine = np.diag([*[float(s) for s in spacing], 1.0])
    header = nib.Nifti1Header()
    header.set_data_dtype(array.dtype)
    image = nib.Nifti1Image(array, affine, header=header)
    image.header.set_zooms(tuple(float(s) for s in spacing))
    nib.save(image, str(path))


# 📦 Корпус
@dataclass
class CorpusCase:
    case_id: str
    seed: int
    split: str


@dataclass
class Corpus:
    root: Path
    class_names: List[str]
    cases: List[CorpusCase]
    split: DatasetSplit
    spec_hash: str = ""

    def image_path(self, case_id: str) -> Path:
        return self.root / f"{case_id}_image.nii.gz"

    def label_path(self, case_id: str) -> Path:
        return self.root / f"{case_id}_label.nii.gz"

    def load_case(self, case_id: str) -> Tuple[np.ndarray, np.ndarray, Tuple[float, float, float]]:
        image, spacing = load_volume(self.image_path(case_id))
        label, _ = load_volume(self.label_path(case_id))
        return image.astype(np.float32), label.astype(np.int64), spacing


def generate_corpus(
    spec: PhantomSpec,
    n_cases: int,
    out_dir: Any,
    labeled_fraction: float,
    split_seed: int = 0,
) -> Corpus:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    case_ids = [f"case_{i:03d}" for i in range(n_cases)]
    split = make_split(case_ids, labeled_fraction, seed=split_seed)

    for index, case_id in enumerate(case_ids):
        image, label = generate_phantom(spec, index)
        save_volume(image, out_dir / f"{case_id}_image.nii.gz")
        save_volume(label, out_dir / f"{case_id}_label.nii.gz")
        logging.info(f"Фантом {case_id} сгенерирован ({split.split_of(case_id)})")

    corpus = Corpus(
        root=out_dir,
        class_names=spec.class_names,
        cases=[CorpusCase(cid, i, split.split_of(cid)) for i, cid in enumerate(case_ids)],
        split=split,
        spec_hash=spec.spec_hash(),
    )
    save_manifest(corpus, spec)
    return corpus


def save_manifest(corpus: Corpus, spec: Optional[PhantomSpec] = None) -> None:
    manifest = {
        "class_names": corpus.class_names,
        "spec_hash": corpus.spec_hash,
        "labeled_fraction": corpus.split.labeled_fraction,
        "cases": [asdict(c) for c in corpus.cases],
    }
    if spec is not None:
        manifest["phantom_spec"] = spec.to_dict()
    (corpus.root / "manifest.json").write_text(
        json.dumps(manifest, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )


def load_corpus(root: Any) -> Corpus:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise MissingInput(path, "манифест корпуса")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
        cases = [CorpusCase(c["case_id"], int(c["seed"]), c["split"]) for c in manifest["cases"]]
        groups: Dict[str, List[str]] = {"labeled": [], "unlabeled": [], "val": [], "test": []}
        for case in cases:
            groups[case.split].append(case.case_id)
        split = DatasetSplit(labeled_fraction=float(manifest["labeled_fraction"]), **groups)
        return Corpus(
            root=root,
            class_names=list(manifest["class_names"]),
            cases=cases,
            split=split,
            spec_hash=manifest.get("spec_hash", ""),
        )
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: некорректный манифест ({e})", path=str(path)) from e


# ✂️ Патчи
def _as_rng(seed: Union[int, np.random.Generator]) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def random_patch(
    volume: np.ndarray,
    label: Optional[np.ndarray],
    size: Sequence[int],
    seed: Union[int, np.random.Generator],
) -> Tuple[np.ndarray, Optional[np.ndarray], Tuple[int, int, int]]:
    size = tuple(int(s) for s in size)
    if len(size) != 3 or any(s > d for s, d in zip(size, volume.shape)):
        raise ShapeError(f"Патч {size} больше тома {volume.shape}")
    rng = _as_rng(seed)
    corner = tuple(int(rng.integers(0, d - s + 1)) for s, d in zip(size, volume.shape))
    window = tuple(slice(c, c + s) for c, s in zip(corner, size))
    return volume[window], (label[window] if label is not None else None), corner


@dataclass
class TrainingBatch:
    x_l: torch.Tensor
    y_l: torch.Tensor
    x_u: torch.Tensor


class PatchSampler:
    """Случайные патчи: n_labeled размеченных + n_unlabeled неразмеченных на шаг."""

    def __init__(
        self,
        labeled: Sequence[Tuple[np.ndarray, np.ndarray]],
        unlabeled: Sequence[np.ndarray],
        patch_size: Sequence[int],
        n_labeled: int = 2,
        n_unlabeled: int = 2,
        seed: int = 0,
    ) -> None:
        if not labeled:
            raise DataError("Нет размеченных случаев для обучения")
        if n_unlabeled > 0 and not unlabeled:
            raise DataError("Нет неразмеченных случаев для обучения")
        self.labeled = list(labeled)
        self.unlabeled = list(unlabeled)
        self.patch_size = tuple(patch_size)
        self.n_labeled = n_labeled
        self.n_unlabeled = n_unlabeled
        self.rng = np.random.default_rng(seed)

    def next_batch(self) -> TrainingBatch:
        images, labels, unlabeled = [], [], []
        for _ in range(self.n_labeled):
            image, label = self.labeled[int(self.rng.integers(len(self.labeled)))]
            patch, patch_label, _ = random_patch(image, label, self.patch_size, self.rng)
            images.append(patch)
            labels.append(patch_label)
        for _ in range(self.n_unlabeled):
            image = self.unlabeled[int(self.rng.integers(len(self.unlabeled)))]
            patch, _, _ = random_patch(image, None, self.patch_size, self.rng)
            unlabeled.append(patch)

        x_l = torch.from_numpy(np.stack(images)[:, None].astype(np.float32))
        y_l = torch.from_numpy(np.stack(labels).astype(np.int64))
        if unlabeled:
            x_u = torch.from_numpy(np.stack(unlabeled)[:, None].astype(np.float32))
        else:
            x_u = x_l.new_zeros((0, *x_l.shape[1:]))
        return TrainingBatch(x_l=x_l, y_l=y_l, x_u=x_u)
