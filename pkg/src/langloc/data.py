"""Scene catalogs, tokenization, synthetic data, pose-file ingestion, augmentation.

The synthetic benchmark replaces real imagery at desk scale: each scene owns
a fixed constellation of eight colored landmarks placed on a sphere around
the unit working box, and every sample renders those landmarks through a
wide-angle pinhole camera as Gaussian splats. Camera positions are uniform
in the unit box and orientations uniform on SO(3), so the pose is recoverable
from pixel evidence alone. Everything is a pure function of
``(seed, scene_index, sample_index)``.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from . import geometry
from .geometry import Pose
from .numerics import rng_from_seed


class DataError(ValueError):
    """Malformed catalog, dataset, or pose file."""


PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

# landmark sphere radius and camera half field of view; together they
# guarantee that every pose in the unit box keeps at least one landmark
# strictly inside the frame (max angular gap to the nearest landmark
# direction is ~67 degrees from any box position)
_LANDMARK_RADIUS = 4.0
_HALF_FOV_DEG = 70.0
_N_LANDMARKS = 8
_SPLAT_SIGMA_WORLD = 1.2
_LANDMARK_SALT = 0x5CEE  # keyed with the scene index only, not the dataset seed

_PALETTE = np.array(
    [
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
        [1.0, 1.0, 1.0],
        [1.0, 0.5, 0.0],
    ]
)


@dataclass(frozen=True)
class Scene:
    index: int
    name: str
    description: str


@dataclass
class SceneCatalog:
    """Ordered list of scenes, each with a free-text caption."""

    scenes: list[Scene]

    def __post_init__(self):
        if not self.scenes:
            raise DataError("catalog has no scenes")
        names = [s.name for s in self.scenes]
        if len(set(names)) != len(names):
            raise DataError(f"duplicate scene names in catalog: {names}")
        for i, scene in enumerate(self.scenes):
            if scene.index != i:
                raise DataError(
                    f"scene indices must be contiguous from 0; got {scene.index} at position {i}"
                )
            if not scene.description.strip():
                raise DataError(f"scene {scene.name!r} has an empty description")

    def __len__(self) -> int:
        return len(self.scenes)

    def __iter__(self):
        return iter(self.scenes)

    def to_json(self) -> str:
        return json.dumps(
            [{"name": s.name, "description": s.description} for s in self.scenes],
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "SceneCatalog":
        try:
            rows = json.loads(text)
        except json.JSONDecodeError as e:
            raise DataError(f"catalog is not valid JSON: {e}") from e
        if not isinstance(rows, list):
            raise DataError("catalog JSON must be a list of scenes")
        scenes = []
        for i, row in enumerate(rows):
            if not isinstance(row, dict) or "name" not in row or "description" not in row:
                raise DataError(f"catalog entry {i} needs 'name' and 'description'")
            scenes.append(Scene(index=i, name=str(row["name"]), description=str(row["description"])))
        return cls(scenes)


def _catalog(pairs) -> SceneCatalog:
    return SceneCatalog([Scene(i, n, d) for i, (n, d) in enumerate(pairs)])


def seven_scenes_catalog() -> SceneCatalog:
    """Indoor office scene list with illustrative object-level captions."""
    return _catalog(
        [
            ("chess", "A chessboard on a small table surrounded by chairs"),
            ("fire", "A fire extinguisher mounted beside an umbrella in a corner"),
            ("heads", "A mannequin head and a headset on a cluttered shelf"),
            ("office", "Two monitors side by side on a cluttered desk with a chair in front"),
            ("pumpkin", "A pumpkin resting on a round table near a window"),
            ("redkitchen", "A red kitchen counter with cabinets and scattered utensils"),
            ("stairs", "A narrow staircase with a handrail climbing along a plain wall"),
        ]
    )


def cambridge_catalog() -> SceneCatalog:
    """Outdoor landmark scene list with illustrative architectural captions."""
    return _catalog(
        [
            ("kingscollege", "A college gatehouse with tall spires behind a wide lawn"),
            ("oldhospital", "A symmetric brick hospital facade with rows of white windows"),
            ("shopfacade", "A corner shop facade with large display windows on a street"),
            ("stmaryschurch", "A gothic church tower with arched doorways and carved stone"),
        ]
    )


def synthetic_catalog(k: int = 3) -> SceneCatalog:
    """Small catalog for the seeded synthetic benchmark."""
    base = [
        ("desk", "A red mug in front of two stacked books on a wooden desk"),
        ("lab", "A blue robot arm beside a toolbox under a bright lamp"),
        ("porch", "A green plant pot next to a striped doormat by the door"),
        ("attic", "A yellow lamp above an old trunk near a round window"),
        ("garage", "An orange cone beside a workbench with hanging tools"),
        ("studio", "A purple easel holding a canvas next to a tall stool"),
        ("pantry", "A white shelf stacked with jars beside a hanging basket"),
        ("cellar", "A gray barrel under a narrow vent next to coiled rope"),
    ]
    if not 1 <= k <= len(base):
        raise DataError(f"synthetic catalog supports 1..{len(base)} scenes, got {k}")
    return _catalog(base[:k])


BUILTIN_CATALOGS = {
    "7scenes": seven_scenes_catalog,
    "cambridge": cambridge_catalog,
    "synthetic3": lambda: synthetic_catalog(3),
}


def resolve_catalog(spec: str) -> SceneCatalog:
    """A builtin catalog name or a path to a catalog JSON file."""
    if spec in BUILTIN_CATALOGS:
        return BUILTIN_CATALOGS[spec]()
    path = Path(spec)
    if not path.is_file():
        raise DataError(
            f"catalog {spec!r} is neither a builtin ({sorted(BUILTIN_CATALOGS)}) nor a file"
        )
    return SceneCatalog.from_json(path.read_text())


# ---------------------------------------------------------------------------
# tokenizer


@dataclass
class Vocab:
    """Deterministic token/id mapping with reserved padding and unknown ids."""

    id_to_token: list[str]
    token_to_id: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise DataError("vocabulary tokens are not unique")

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    def __len__(self) -> int:
        return len(self.id_to_token)


_WORD_SPLIT = re.compile(r"[^a-z0-9]+")


def normalize_text(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return [t for t in _WORD_SPLIT.split(text.lower()) if t]


def build_vocab(catalog: SceneCatalog) -> Vocab:
    """Sorted union of all catalog description tokens plus reserved ids."""
    tokens = set()
    for scene in catalog:
        tokens.update(normalize_text(scene.description))
    return Vocab([PAD_TOKEN, UNK_TOKEN] + sorted(tokens))


def tokenize(text: str, vocab: Vocab, max_len: int) -> np.ndarray:
    """Map text to ids, truncated to ``max_len``; empty text maps to [unk]."""
    if max_len < 1:
        raise DataError(f"max_len must be >= 1, got {max_len}")
    words = normalize_text(text)[:max_len]
    if not words:
        return np.array([vocab.unk_id], dtype=np.int64)
    return np.array([vocab.token_to_id.get(w, vocab.unk_id) for w in words], dtype=np.int64)


def detokenize(ids, vocab: Vocab) -> str:
    return " ".join(vocab.id_to_token[int(i)] for i in ids)


# ---------------------------------------------------------------------------
# synthetic benchmark


@dataclass(frozen=True)
class DatasetConfig:
    """Rendering geometry for the synthetic benchmark."""

    channels: int = 3
    height: int = 64
    width: int = 64
    max_caption_len: int = 32

    def __post_init__(self):
        if self.channels != 3:
            raise DataError(f"synthetic rendering needs 3 channels, got {self.channels}")
        for key in ("height", "width", "max_caption_len"):
            if getattr(self, key) < 1:
                raise DataError(f"{key} must be positive")


@dataclass
class PoseSample:
    """One training/eval record: image, caption ids, scene label, pose."""

    image: np.ndarray  # [C, H, W], values in [0, 1]
    caption_tokens: np.ndarray
    scene_index: int
    pose: Pose


def scene_landmarks(scene_index: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed landmark positions and colors for a scene.

    Derived from the scene index alone: the cube-corner constellation is
    rotated by a scene-specific random rotation and the color palette is
    permuted, so scenes are geometrically and chromatically distinct while
    staying independent of any dataset seed.
    """
    rng = rng_from_seed(_LANDMARK_SALT, scene_index)
    corners = np.array(
        [[sx, sy, sz] for sx in (-1.0, 1.0) for sy in (-1.0, 1.0) for sz in (-1.0, 1.0)]
    ) / math.sqrt(3.0)
    rot = geometry.quat_to_matrix(geometry.random_unit_quaternion(rng))
    center = np.full(3, 0.5)
    positions = center + _LANDMARK_RADIUS * corners @ rot.T
    colors = _PALETTE[rng.permutation(_N_LANDMARKS)]
    return positions, colors


def render_landmarks(pose: Pose, positions: np.ndarray, colors: np.ndarray,
                     height: int, width: int) -> np.ndarray:
    """Project landmarks through a pinhole camera and splat them as Gaussians."""
    focal = (width / 2.0) / math.tan(math.radians(_HALF_FOV_DEG))
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    world_to_cam = geometry.quat_to_matrix(pose.q).T
    image = np.zeros((3, height, width))
    vv, uu = np.meshgrid(np.arange(height, dtype=np.float64),
                         np.arange(width, dtype=np.float64), indexing="ij")
    for point, color in zip(positions, colors):
        cam = world_to_cam @ (point - pose.p)
        z = cam[2]
        if z <= 1e-6:
            continue
        u = focal * cam[0] / z + cx
        v = focal * cam[1] / z + cy
        sigma = focal * _SPLAT_SIGMA_WORLD / z
        if u < -4 * sigma or u > width - 1 + 4 * sigma:
            continue
        if v < -4 * sigma or v > height - 1 + 4 * sigma:
            continue
        splat = np.exp(-((uu - u) ** 2 + (vv - v) ** 2) / (2.0 * sigma * sigma))
        image += color[:, None, None] * splat
    return np.clip(image, 0.0, 1.0)


def generate_sample(seed: int, scene: Scene, sample_index: int,
                    config: DatasetConfig, vocab: Vocab) -> PoseSample:
    rng = rng_from_seed(seed, scene.index, sample_index)
    p = rng.uniform(0.0, 1.0, size=3)
    q = geometry.random_unit_quaternion(rng)
    pose = Pose(p=p, q=q)
    positions, colors = scene_landmarks(scene.index)
    image = render_landmarks(pose, positions, colors, config.height, config.width)
    tokens = tokenize(scene.description, vocab, config.max_caption_len)
    return PoseSample(image=image, caption_tokens=tokens, scene_index=scene.index, pose=pose)


def generate_synthetic(seed: int, catalog: SceneCatalog, samples_per_scene: int,
                       config: DatasetConfig) -> list[PoseSample]:
    """Seeded synthetic dataset: ``len(catalog) * samples_per_scene`` samples.

    Each sample is fully determined by ``(seed, scene_index, sample_index)``,
    so generation could run in parallel; here samples are emitted in index
    order.
    """
    if samples_per_scene < 1:
        raise DataError(f"samples_per_scene must be >= 1, got {samples_per_scene}")
    vocab = build_vocab(catalog)
    return [
        generate_sample(seed, scene, i, config, vocab)
        for scene in catalog
        for i in range(samples_per_scene)
    ]


# ---------------------------------------------------------------------------
# on-disk layout


def serialize_pose_matrix(pose: Pose) -> str:
    """4x4 camera-to-world matrix as 16 whitespace-separated numbers.

    Values use the shortest round-trip float representation, so
    serialize -> parse is bit-exact.
    """
    m = pose.to_matrix()
    return "\n".join(" ".join(repr(float(v)) for v in row) for row in m) + "\n"


def parse_7scenes_pose(text: str) -> Pose:
    """Parse a per-frame pose file: 16 numbers forming a row-major 4x4
    homogeneous camera-to-world matrix with bottom row (0,0,0,1)."""
    tokens = text.split()
    if len(tokens) != 16:
        raise DataError(f"pose file must hold 16 numbers, got {len(tokens)}")
    try:
        values = np.array([float(t) for t in tokens]).reshape(4, 4)
    except ValueError as e:
        raise DataError(f"pose file holds a non-numeric token: {e}") from e
    try:
        return Pose.from_matrix(values)
    except geometry.GeometryError as e:
        raise DataError(str(e)) from e


def parse_cambridge_index(lines, world_to_camera: bool = True) -> list[tuple[str, Pose]]:
    """Parse dataset index rows "path x y z qw qx qy qz" (scalar-first).

    Header lines (anything whose second token is not numeric) are skipped. A
    row with a parseable path but the wrong number of fields is an error
    naming the line. With ``world_to_camera=True`` (default) the file's
    quaternion is taken as the world-to-camera rotation and conjugated so
    the in-memory pose is camera-to-world; positions are camera centers in
    world coordinates either way.
    """
    if isinstance(lines, str):
        lines = lines.splitlines()
    out = []
    for lineno, raw in enumerate(lines, start=1):
        tokens = raw.split()
        if len(tokens) < 2:
            continue
        try:
            float(tokens[1])
        except ValueError:
            continue
        if len(tokens) != 8:
            raise DataError(f"line {lineno}: expected path + 7 numbers, got {len(tokens)} fields")
        try:
            nums = [float(t) for t in tokens[1:]]
        except ValueError as e:
            raise DataError(f"line {lineno}: non-numeric field: {e}") from e
        q, degenerate = geometry.normalize(np.array(nums[3:]))
        if degenerate:
            raise DataError(f"line {lineno}: quaternion has zero norm")
        if world_to_camera:
            q = geometry.quat_conjugate(q)
        q = geometry.canonicalize_hemisphere(q)
        out.append((tokens[0], Pose(p=np.array(nums[:3]), q=q)))
    return out


def save_dataset(samples: list[PoseSample], catalog: SceneCatalog,
                 config: DatasetConfig, seed: int, root: Path) -> str:
    """Write one directory per scene (manifest + image blocks + pose files).

    Returns a sha256 digest over every written file, stable across runs.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    by_scene: dict[int, list[PoseSample]] = {s.index: [] for s in catalog}
    for sample in samples:
        if sample.scene_index not in by_scene:
            raise DataError(f"sample references scene {sample.scene_index} missing from catalog")
        by_scene[sample.scene_index].append(sample)

    written: list[Path] = []
    for scene in catalog:
        scene_dir = root / f"scene-{scene.index:02d}"
        scene_dir.mkdir(parents=True, exist_ok=True)
        rows = by_scene[scene.index]
        manifest = {
            "scene_index": scene.index,
            "name": scene.name,
            "description": scene.description,
            "sample_count": len(rows),
            "seed": seed,
            "channels": config.channels,
            "height": config.height,
            "width": config.width,
            "max_caption_len": config.max_caption_len,
        }
        manifest_path = scene_dir / "manifest.json"
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        written.append(manifest_path)
        for i, sample in enumerate(rows):
            image_path = scene_dir / f"frame-{i:06d}.image.bin"
            image_path.write_bytes(sample.image.astype("<f8").tobytes())
            pose_path = scene_dir / f"frame-{i:06d}.pose.txt"
            pose_path.write_text(serialize_pose_matrix(sample.pose))
            written.extend([image_path, pose_path])

    digest = hashlib.sha256()
    for path in sorted(written, key=lambda p: p.relative_to(root).as_posix()):
        digest.update(path.relative_to(root).as_posix().encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


def load_dataset(root: Path) -> tuple[list[PoseSample], SceneCatalog, DatasetConfig]:
    """Inverse of :func:`save_dataset`; rebuilds captions from manifests."""
    root = Path(root)
    scene_dirs = sorted(root.glob("scene-*"))
    if not scene_dirs:
        raise DataError(f"no scene directories under {root}")
    manifests = []
    for scene_dir in scene_dirs:
        manifest_path = scene_dir / "manifest.json"
        if not manifest_path.is_file():
            raise DataError(f"missing manifest: {manifest_path}")
        manifests.append((scene_dir, json.loads(manifest_path.read_text())))
    manifests.sort(key=lambda m: m[1]["scene_index"])
    catalog = SceneCatalog(
        [Scene(m["scene_index"], m["name"], m["description"]) for _, m in manifests]
    )
    first = manifests[0][1]
    config = DatasetConfig(
        channels=first["channels"],
        height=first["height"],
        width=first["width"],
        max_caption_len=first["max_caption_len"],
    )
    vocab = build_vocab(catalog)
    samples = []
    for scene_dir, manifest in manifests:
        shape = (config.channels, config.height, config.width)
        tokens = tokenize(manifest["description"], vocab, config.max_caption_len)
        for i in range(manifest["sample_count"]):
            blob = (scene_dir / f"frame-{i:06d}.image.bin").read_bytes()
            image = np.frombuffer(blob, dtype="<f8").reshape(shape).copy()
            pose = parse_7scenes_pose((scene_dir / f"frame-{i:06d}.pose.txt").read_text())
            samples.append(
                PoseSample(
                    image=image,
                    caption_tokens=tokens,
                    scene_index=manifest["scene_index"],
                    pose=pose,
                )
            )
    return samples, catalog, config


# ---------------------------------------------------------------------------
# augmentation


def _hue_shift(image: np.ndarray, amount: float) -> np.ndarray:
    """Rotate hue by ``amount`` (fraction of the wheel) via RGB<->HSV."""
    if amount == 0.0:
        return image
    hsv = rgb_to_hsv(np.moveaxis(image, 0, -1))
    hsv[..., 0] = (hsv[..., 0] + amount) % 1.0
    return np.moveaxis(hsv_to_rgb(hsv), -1, 0)


def color_jitter(image: np.ndarray, rng: np.random.Generator,
                 brightness: float = 0.6, contrast: float = 0.7,
                 saturation: float = 0.7, hue: float = 0.5) -> np.ndarray:
    """Photometric augmentation in fixed order brightness, contrast,
    saturation, hue.

    Scales are drawn uniformly from [max(0, 1-f), 1+f] per stage and the hue
    shift from [-hue, hue]; the output is clamped to [0, 1]. All factors at
    zero is the identity.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DataError(f"color_jitter needs a [3, H, W] image, got shape {image.shape}")
    b = rng.uniform(max(0.0, 1.0 - brightness), 1.0 + brightness)
    c = rng.uniform(max(0.0, 1.0 - contrast), 1.0 + contrast)
    s = rng.uniform(max(0.0, 1.0 - saturation), 1.0 + saturation)
    h = rng.uniform(-hue, hue)

    out = np.clip(image * b, 0.0, 1.0)
    gray = 0.299 * out[0] + 0.587 * out[1] + 0.114 * out[2]
    out = np.clip(c * out + (1.0 - c) * gray.mean(), 0.0, 1.0)
    gray = 0.299 * out[0] + 0.587 * out[1] + 0.114 * out[2]
    out = np.clip(s * out + (1.0 - s) * gray, 0.0, 1.0)
    out = np.clip(_hue_shift(out, h), 0.0, 1.0)
    return out


def crop(image: np.ndarray, out: int = 224, mode: str = "center",
         rng: np.random.Generator | None = None) -> np.ndarray:
    """Square crop to ``out`` x ``out``; center offsets are floored halves,
    random offsets are drawn uniformly (inclusive of the far edge)."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise DataError(f"crop needs a [C, H, W] image, got shape {image.shape}")
    _, h, w = image.shape
    if h < out or w < out:
        raise DataError(f"image {h}x{w} is smaller than crop size {out}")
    if mode == "center":
        top, left = (h - out) // 2, (w - out) // 2
    elif mode == "random":
        if rng is None:
            raise DataError("random crop needs a generator")
        top = int(rng.integers(0, h - out + 1))
        left = int(rng.integers(0, w - out + 1))
    else:
        raise DataError(f"crop mode must be 'center' or 'random', got {mode!r}")
    return image[:, top:top + out, left:left + out]
