"""Synthetic nadir-radar oil-slick scenes.

Forward model: a lossless oil film on Debye seawater seen at normal incidence
(two-interface thin-film reflectance), attenuated by a Kirchhoff-style
specular roughness factor driven by wind speed, plus additive Gaussian noise.
It is a documented surrogate, not a validated scattering model.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .netgraph import ConfigError

C_LIGHT = 299_792_458.0
EPS0 = 8.8541878128e-12

# single-Debye seawater constants (20 degC, 35 ppt)
EPS_STATIC = 72.0
EPS_INF = 4.9
F_RELAX_GHZ = 17.0
SIGMA_IONIC = 4.8

OSS_MAGIC = b"OSS1"
OSS_VERSION = 1
N_CLASSES = 11
TRAIN_FRACTION_PERMILLE = 908
MANIFEST_NAME = "manifest.json"


class SceneFormatError(ValueError):
    pass


class DegenerateChannelError(ValueError):
    pass


@dataclass(frozen=True)
class EnvironmentParams:
    max_thickness_mm: int = 10
    wind_min: float = 2.0
    wind_max: float = 8.0
    eps_oil: float = 3.0
    water_temp_c: float = 20.0
    salinity_ppt: float = 35.0
    a_rough_mm: float = 0.4  # rms height per m/s of wind
    noise_sigma: float = 0.01

    def __post_init__(self):
        if not 2.0 <= self.wind_min <= self.wind_max <= 8.0:
            raise ConfigError(f"wind range must lie inside [2, 8] m/s, got [{self.wind_min}, {self.wind_max}]")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")


@dataclass(frozen=True)
class RadarSpec:
    frequencies_ghz: tuple[float, ...] = tuple(float(f) for f in range(4, 13))

    def __post_init__(self):
        f = self.frequencies_ghz
        if len(f) < 2 or any(b <= a for a, b in zip(f, f[1:])):
            raise ConfigError(f"need >= 2 strictly increasing frequencies, got {f}")

    @property
    def channels(self) -> int:
        return len(self.frequencies_ghz)


def water_permittivity(f_ghz: float) -> complex:
    if not 1.0 <= f_ghz <= 20.0:
        raise ConfigError(f"frequency {f_ghz} GHz outside the surrogate's [1, 20] GHz range")
    debye = EPS_INF + (EPS_STATIC - EPS_INF) / (1 + 1j * f_ghz / F_RELAX_GHZ)
    return debye - 1j * SIGMA_IONIC / (2 * math.pi * f_ghz * 1e9 * EPS0)


def film_reflectance(d_mm: float, f_ghz: float, eps_oil: float = 3.0) -> float:
    """Normal-incidence power reflectance of air / oil (d_mm thick) / seawater."""
    if not 0.0 <= d_mm <= 10.0:
        raise ValueError(f"thickness {d_mm} mm outside [0, 10]")
    n2 = math.sqrt(eps_oil)
    n3 = np.sqrt(complex(water_permittivity(f_ghz)))
    r12 = (1 - n2) / (1 + n2)
    r23 = (n2 - n3) / (n2 + n3)
    beta = 2 * math.pi * f_ghz * 1e9 * n2 * d_mm * 1e-3 / C_LIGHT
    phase = np.exp(-2j * beta)
    r = (r12 + r23 * phase) / (1 + r12 * r23 * phase)
    return float(abs(r) ** 2)


def roughness_factor(wind: float, f_ghz: float, a_rough_mm: float = 0.4) -> float:
    if not 0.0 <= wind <= 20.0:
        raise ValueError(f"wind {wind} m/s outside [0, 20]")
    k = 2 * math.pi * f_ghz * 1e9 / C_LIGHT
    sigma_h = a_rough_mm * 1e-3 * wind
    return math.exp(-((2 * k * sigma_h) ** 2))


def signature_table(wind: float, env: EnvironmentParams, radar: RadarSpec) -> np.ndarray:
    """(classes, R) noiseless received power per thickness class."""
    table = np.empty((env.max_thickness_mm + 1, radar.channels))
    for ch, f in enumerate(radar.frequencies_ghz):
        rough = roughness_factor(wind, f, env.a_rough_mm)
        for d in range(env.max_thickness_mm + 1):
            table[d, ch] = film_reflectance(float(d), f, env.eps_oil) * rough
    return table


def _bump(h: int, w: int, cy: float, cx: float, sy: float, sx: float, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    ca, sa = math.cos(angle), math.sin(angle)
    u = ca * dx + sa * dy
    v = -sa * dx + ca * dy
    return np.exp(-0.5 * ((u / sx) ** 2 + (v / sy) ** 2))


def synth_thickness_map(rng: np.random.Generator, h: int, w: int,
                        max_mm: int = 10, coverage: tuple[float, float] = (0.05, 0.60)) -> np.ndarray:
    """Layered slicks: K in 1..4 blobs, each 1..3 Gaussian bumps, thicker at the core.

    Maps whose oil coverage falls outside ``coverage`` are redrawn from the same
    stream, so the result is still a pure function of the rng state.
    """
    if h < 16 or w < 16:
        raise ValueError(f"scene must be at least 16x16, got {h}x{w}")
    size = float(min(h, w))
    for _ in range(200):
        field_mm = np.zeros((h, w))
        for _slick in range(int(rng.integers(1, 5))):
            cy, cx = rng.uniform(0.15, 0.85, size=2) * (h, w)
            peak = rng.uniform(2.0, max_mm)
            slick = np.zeros((h, w))
            for _b in range(int(rng.integers(1, 4))):
                oy, ox = rng.normal(0.0, 0.06 * size, size=2)
                sy, sx = rng.uniform(0.05, 0.13, size=2) * size
                slick += _bump(h, w, cy + oy, cx + ox, sy, sx, rng.uniform(0, math.pi))
            slick *= peak / slick.max()
            np.maximum(field_mm, slick, out=field_mm)
        labels = np.clip(np.rint(field_mm), 0, max_mm).astype(np.uint8)
        frac = np.count_nonzero(labels) / labels.size
        if coverage[0] <= frac <= coverage[1]:
            return labels
    return labels


def render_cube(labels: np.ndarray, wind: float, rng: np.random.Generator,
                env: EnvironmentParams = EnvironmentParams(),
                radar: RadarSpec = RadarSpec()) -> np.ndarray:
    table = signature_table(wind, env, radar)  # classes x R
    clean = table.T[:, labels]  # R x H x W
    noise = rng.normal(0.0, env.noise_sigma, size=clean.shape) if env.noise_sigma > 0 else 0.0
    return (clean + noise).astype(np.float32)


def splitmix64(seed: int, index: int) -> int:
    mask = (1 << 64) - 1
    z = (seed + (index + 1) * 0x9E3779B97F4A7C15) & mask
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
    return z ^ (z >> 31)


def split_sizes(n_scenes: int) -> tuple[int, int]:
    """First ceil(0.908 n) scenes train (at least one scene is kept for test)."""
    n_train = min(-(-TRAIN_FRACTION_PERMILLE * n_scenes // 1000), n_scenes - 1)
    return n_train, n_scenes - n_train


@dataclass
class Scene:
    labels: np.ndarray
    wind: float
    cube: np.ndarray


def make_scene(seed: int, index: int, h: int, w: int,
               env: EnvironmentParams, radar: RadarSpec) -> Scene:
    rng = np.random.default_rng(splitmix64(seed, index))
    wind = float(rng.uniform(env.wind_min, env.wind_max))
    labels = synth_thickness_map(rng, h, w, env.max_thickness_mm)
    return Scene(labels, wind, render_cube(labels, wind, rng, env, radar))


def write_scene(path: Path, scene: Scene) -> None:
    r, h, w = scene.cube.shape
    with open(path, "wb") as fh:
        fh.write(OSS_MAGIC)
        fh.write(struct.pack("<IHHHHf", OSS_VERSION, h, w, r, N_CLASSES, scene.wind))
        fh.write(np.ascontiguousarray(scene.cube, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(scene.labels, dtype=np.uint8).tobytes())


def read_scene(path: Path) -> Scene:
    data = Path(path).read_bytes()
    if data[:4] != OSS_MAGIC:
        raise SceneFormatError(f"{path}: bad magic {data[:4]!r}")
    head = struct.calcsize("<IHHHHf")
    if len(data) < 4 + head:
        raise SceneFormatError(f"{path}: truncated header")
    version, h, w, r, c, wind = struct.unpack_from("<IHHHHf", data, 4)
    if version != OSS_VERSION:
        raise SceneFormatError(f"{path}: unsupported version {version}")
    off = 4 + head
    n = r * h * w
    if len(data) != off + 4 * n + h * w:
        raise SceneFormatError(f"{path}: expected {off + 4 * n + h * w} bytes, found {len(data)}")
    cube = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(r, h, w).astype(np.float32)
    labels = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=off + 4 * n).reshape(h, w).copy()
    if labels.max(initial=0) >= c:
        raise SceneFormatError(f"{path}: label {labels.max()} outside 0..{c - 1}")
    return Scene(labels, float(wind), cube)


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray


def channel_stats(cubes: list[np.ndarray]) -> NormStats:
    stack = np.stack(cubes).astype(np.float64)  # N, R, H, W
    return NormStats(stack.mean(axis=(0, 2, 3)), stack.std(axis=(0, 2, 3)))


def normalize(cube: np.ndarray, stats: NormStats) -> np.ndarray:
    std = np.asarray(stats.std, dtype=np.float64)
    if np.any(std <= 0):
        raise DegenerateChannelError(f"zero std in channel(s) {np.flatnonzero(std <= 0).tolist()}")
    mean = np.asarray(stats.mean, dtype=np.float64)
    return ((cube - mean[:, None, None]) / std[:, None, None]).astype(np.float32)


def denormalize(cube: np.ndarray, stats: NormStats) -> np.ndarray:
    return (cube * np.asarray(stats.std)[:, None, None] + np.asarray(stats.mean)[:, None, None]).astype(np.float32)


@dataclass
class DatasetManifest:
    seed: int
    env: EnvironmentParams
    radar: RadarSpec
    scenes: list[dict]
    norm: NormStats
    resolution: tuple[int, int] = (100, 100)

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "env": asdict(self.env),
            "radar": {"frequencies_ghz": list(self.radar.frequencies_ghz), "geometry": "nadir"},
            "resolution": list(self.resolution),
            "scenes": self.scenes,
            "norm": {"mean": [float(v) for v in self.norm.mean], "std": [float(v) for v in self.norm.std]},
        }
        return json.dumps(doc, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        doc = json.loads(text)
        radar = doc["radar"]
        return cls(
            seed=int(doc["seed"]),
            env=EnvironmentParams(**doc["env"]),
            radar=RadarSpec(tuple(radar["frequencies_ghz"])),
            scenes=list(doc["scenes"]),
            norm=NormStats(np.array(doc["norm"]["mean"]), np.array(doc["norm"]["std"])),
            resolution=tuple(doc.get("resolution", (100, 100))),
        )


def generate_dataset(out_dir: str | Path, n_scenes: int, h: int, w: int, seed: int,
                     env: EnvironmentParams = EnvironmentParams(),
                     radar: RadarSpec = RadarSpec()) -> DatasetManifest:
    if n_scenes < 2:
        raise ConfigError(f"need at least 2 scenes, got {n_scenes}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_train, _ = split_sizes(n_scenes)
    entries, train_cubes = [], []
    for i in range(n_scenes):
        scene = make_scene(seed, i, h, w, env, radar)
        name = f"scene_{i:04d}.oss"
        write_scene(out / name, scene)
        split = "train" if i < n_train else "test"
        entries.append({"file": name, "split": split})
        if split == "train":
            train_cubes.append(scene.cube)
    manifest = DatasetManifest(seed, env, radar, entries, channel_stats(train_cubes), (h, w))
    (out / MANIFEST_NAME).write_text(manifest.to_json(), encoding="utf-8")
    return manifest


@dataclass
class Dataset:
    """Normalized in-memory dataset: ``x`` is (N, R, H, W) float32, ``y`` is (N, H, W) uint8."""
    manifest: DatasetManifest
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


def load_dataset(data_dir: str | Path) -> Dataset:
    root = Path(data_dir)
    mpath = root / MANIFEST_NAME
    if not mpath.is_file():
        raise FileNotFoundError(f"no dataset manifest at {mpath}")
    manifest = DatasetManifest.from_json(mpath.read_text(encoding="utf-8"))
    parts: dict[str, tuple[list, list]] = {"train": ([], []), "test": ([], [])}
    for entry in manifest.scenes:
        scene = read_scene(root / entry["file"])
        xs, ys = parts[entry["split"]]
        xs.append(normalize(scene.cube, manifest.norm))
        ys.append(scene.labels)

    def stack(split):
        xs, ys = parts[split]
        return np.stack(xs), np.stack(ys)

    train_x, train_y = stack("train")
    test_x, test_y = stack("test")
    return Dataset(manifest, train_x, train_y, test_x, test_y)
