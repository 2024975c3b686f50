"""Synthetic ellipse phantoms and per-client low-dose datasets."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ctphys
from .ctphys import ImageGrid
from .protocol import Protocol, load_protocols, save_protocols

# linear attenuation per mm
ATTENUATION = {"air": 0.000, "fat": 0.017, "soft": 0.019, "blood": 0.021, "bone": 0.048}
TISSUES = tuple(ATTENUATION)
BODY_PARTS = ("chest", "abdomen", "pelvis")
# fixed ceiling used to map attenuation into [0, 1] for the network
ATTENUATION_CEILING = 0.06
DEFAULT_FOV_MM = 40.0


class SeedCollision(ValueError):
    pass


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    theta: float
    tissue: str
    lesion: bool = False

    def __post_init__(self):
        if self.tissue not in ATTENUATION:
            raise ValueError(f"unknown tissue class {self.tissue!r}")

    @property
    def reach(self) -> float:
        return float(np.hypot(self.cx, self.cy) + max(self.a, self.b))


@dataclass(frozen=True)
class Phantom:
    ellipses: tuple
    patient_seed: int
    body_part: str
    fov_mm: float = DEFAULT_FOV_MM

    def __post_init__(self):
        if not self.ellipses:
            raise ValueError("phantom needs at least one ellipse")
        if self.body_part not in BODY_PARTS:
            raise ValueError(f"unknown body part {self.body_part!r}")
        for e in self.ellipses:
            if e.reach > self.fov_mm / 2 + 1e-9:
                raise ValueError(f"ellipse {e} leaves the field-of-view circle")


@dataclass(frozen=True)
class AnatomyMetadata:
    body_part: str
    tissue_fractions: dict
    lesion_count: int

    @property
    def air_fraction(self) -> float:
        return 1.0 - sum(self.tissue_fractions.values())


def _organ_layout(body_part: str, rng: np.random.Generator):
    """Organ, bone and lesion templates in units of the body semi-axes."""
    if body_part == "chest":
        organs = [(-0.45, 0.05, 0.32, 0.55, "air"), (0.45, 0.05, 0.32, 0.55, "air"),
                  (0.05, -0.05, 0.25, 0.22, "blood"), (0.0, 0.55, 0.35, 0.12, "fat")]
        bones = [(0.0, -0.72, 0.09, 0.09), (-0.75, -0.4, 0.06, 0.12), (0.75, -0.4, 0.06, 0.12)]
        n_bone = int(rng.integers(0, 4))
    elif body_part == "abdomen":
        organs = [(-0.35, 0.1, 0.4, 0.35, "blood"), (0.45, 0.05, 0.2, 0.25, "fat"),
                  (0.1, -0.35, 0.3, 0.15, "fat"), (0.35, -0.25, 0.12, 0.15, "blood")]
        bones = [(0.0, -0.72, 0.1, 0.1), (-0.55, -0.55, 0.06, 0.06), (0.55, -0.55, 0.06, 0.06)]
        n_bone = int(rng.integers(0, 4))
    else:
        organs = [(0.0, 0.2, 0.3, 0.25, "blood"), (0.0, -0.25, 0.22, 0.18, "fat"),
                  (-0.55, 0.35, 0.18, 0.15, "fat"), (0.55, 0.35, 0.18, 0.15, "fat")]
        bones = [(-0.6, -0.1, 0.18, 0.3), (0.6, -0.1, 0.18, 0.3), (0.0, -0.68, 0.16, 0.12)]
        n_bone = int(rng.integers(1, 4))
    n_organ = int(rng.integers(2, 5))
    pick = rng.permutation(len(organs))[:n_organ]
    organs = [organs[i] for i in sorted(pick)]
    bones = [bones[i] for i in sorted(rng.permutation(len(bones))[:n_bone])]
    n_lesion = int(rng.integers(0, 3))
    lesions = []
    for _ in range(n_lesion):
        r = rng.uniform(0.1, 0.5)
        phi = rng.uniform(0, 2 * np.pi)
        size = rng.uniform(0.06, 0.11)
        lesions.append((r * np.cos(phi), r * np.sin(phi), size, size * rng.uniform(0.7, 1.0),
                        str(rng.choice(["blood", "fat", "bone"]))))
    return organs, bones, lesions


def generate_patient(patient_seed: int, body_part: str, n_slices: int,
                     fov_mm: float = DEFAULT_FOV_MM) -> list[Phantom]:
    """Deterministic family of slices for one synthetic patient.

    Shapes are laid out relative to ``fov_mm`` (side of the square field of
    view) so a patient fills the image regardless of pixel length.
    """
    if n_slices < 1:
        raise ValueError("n_slices must be >= 1")
    if body_part not in BODY_PARTS:
        raise ValueError(f"unknown body part {body_part!r}")
    rng = np.random.default_rng([int(patient_seed), BODY_PARTS.index(body_part)])
    half = fov_mm / 2.0
    body_a = half * rng.uniform(0.78, 0.86)
    body_b = half * rng.uniform(0.58, 0.72)
    organs, bones, lesions = _organ_layout(body_part, rng)
    jitter = rng.normal(0, 0.03, size=(len(organs) + len(bones) + len(lesions), 4))
    phase = rng.uniform(0, 2 * np.pi, size=3)
    tilt = rng.uniform(-0.15, 0.15)

    slices = []
    for z in range(n_slices):
        t = 2 * np.pi * z / max(n_slices, 8)
        scale = 1.0 + 0.04 * np.sin(t + phase[0])
        grow = 1.0 + 0.12 * np.sin(t + phase[1])
        shift = 0.02 * half * np.sin(t + phase[2])
        a, b = body_a * scale, body_b * scale
        ells = [Ellipse(float(shift), 0.0, float(a), float(b), float(tilt), "soft")]
        k = 0
        for (ux, uy, sa, sb, tissue) in organs:
            j = jitter[k]; k += 1
            ells.append(_place(shift, a, b, tilt, ux + j[0], uy + j[1],
                               sa * grow * (1 + j[2]), sb * grow * (1 + j[3]), tissue, half))
        for (ux, uy, sa, sb) in bones:
            j = jitter[k]; k += 1
            ells.append(_place(shift, a, b, tilt, ux + j[0], uy + j[1],
                               sa * (1 + j[2]), sb * (1 + j[3]), "bone", half))
        for (ux, uy, sa, sb, tissue) in lesions:
            j = jitter[k]; k += 1
            ells.append(_place(shift, a, b, tilt, ux + j[0], uy + j[1],
                               sa * (1 + 0.5 * np.sin(t)), sb * (1 + 0.5 * np.sin(t)),
                               tissue, half, lesion=True))
        slices.append(Phantom(tuple(ells), int(patient_seed), body_part, fov_mm))
    return slices


def _place(shift, a, b, tilt, ux, uy, sa, sb, tissue, half, lesion=False) -> Ellipse:
    # template coordinates are fractions of the body semi-axes, rotated with it
    c, s = np.cos(tilt), np.sin(tilt)
    x, y = ux * a, uy * b
    cx, cy = shift + c * x - s * y, s * x + c * y
    ea, eb = abs(sa) * a, abs(sb) * b
    room = 0.97 * half - np.hypot(cx, cy)
    if max(ea, eb) > room:
        ea, eb = ea * room / max(ea, eb), eb * room / max(ea, eb)
    return Ellipse(float(cx), float(cy), float(ea), float(eb), float(tilt), tissue, lesion)


def rasterize(ph: Phantom, size: int, pixel_len: float) -> tuple[ImageGrid, AnatomyMetadata]:
    if size < 8:
        raise ValueError("size must be >= 8")
    if not pixel_len > 0:
        raise ValueError("pixel_len must be > 0")
    coords = (np.arange(size) - (size - 1) / 2.0) * pixel_len
    x = coords[None, :]
    y = -coords[:, None]
    labels = np.zeros((size, size), dtype=np.int8)  # 0 = air
    lesion_count = 0
    for e in ph.ellipses:
        c, s = np.cos(e.theta), np.sin(e.theta)
        dx, dy = x - e.cx, y - e.cy
        u = (c * dx + s * dy) / e.a
        v = (-s * dx + c * dy) / e.b
        inside = u * u + v * v <= 1.0
        labels[inside] = TISSUES.index(e.tissue)
        if e.lesion:
            lesion_count += 1
    mu = np.array([ATTENUATION[t] for t in TISSUES])[labels]
    total = labels.size
    fractions = {t: np.count_nonzero(labels == i) / total
                 for i, t in enumerate(TISSUES) if t != "air"}
    return ImageGrid(mu, pixel_len), AnatomyMetadata(ph.body_part, fractions, lesion_count)


# --------------------------------------------------------------------------
# client datasets
# --------------------------------------------------------------------------

@dataclass
class Sample:
    low_dose: ImageGrid
    reference: ImageGrid
    metadata: AnatomyMetadata
    patient_seed: int
    slice_index: int
    split: str

    @property
    def x(self) -> np.ndarray:
        return self.low_dose.data / ATTENUATION_CEILING

    @property
    def y(self) -> np.ndarray:
        return self.reference.data / ATTENUATION_CEILING


@dataclass
class ClientDataset:
    client_id: int
    protocol: Protocol
    samples: list = field(default_factory=list)

    def split(self, name: str) -> list:
        return [s for s in self.samples if s.split == name]

    @property
    def train(self) -> list:
        return self.split("train")

    @property
    def test(self) -> list:
        return self.split("test")


class SeedRegistry:
    """Tracks training patient seeds so no patient trains on two clients."""

    def __init__(self):
        self.owner: dict[int, int] = {}

    def claim(self, client_id: int, seeds: Sequence[int]) -> None:
        for s in seeds:
            other = self.owner.get(int(s))
            if other is not None and other != client_id:
                raise SeedCollision(
                    f"patient seed {s} already used for training by client {other}")
        for s in seeds:
            self.owner[int(s)] = client_id


def body_part_for(patient_seed: int) -> str:
    return BODY_PARTS[int(patient_seed) % len(BODY_PARTS)]


def _slice_seed(noise_seed: int, patient_seed: int, z: int) -> int:
    return int(np.random.SeedSequence([noise_seed, patient_seed, z]).generate_state(1)[0])


def simulate_slice(ph: Phantom, protocol: Protocol, image_size: int, noise_seed: int,
                   noise: ctphys.NoiseConfig | None = None):
    """Reference image, low-dose FBP image and metadata for one phantom slice."""
    ref, meta = rasterize(ph, image_size, protocol.pl)
    # float32 storage so in-memory and on-disk datasets agree bit for bit
    ref = ImageGrid(ref.data.astype(np.float32).astype(np.float64), protocol.pl)
    geo = ctphys.derive_geometry(protocol, image_size)
    sino = ctphys.forward_project(ref, geo)
    noisy = ctphys.simulate_low_dose(sino, noise or ctphys.NoiseConfig.from_protocol(protocol),
                                     noise_seed)
    low = ctphys.fbp_reconstruct(noisy, geo)
    low = ImageGrid(low.data.astype(np.float32).astype(np.float64), protocol.pl)
    return ref, low, meta


def build_client_dataset(client_id: int, protocol: Protocol, patient_seeds: Sequence[int],
                         slices_per_patient: int, image_size: int, noise_seed: int,
                         split: str = "train", registry: SeedRegistry | None = None,
                         noise: ctphys.NoiseConfig | None = None,
                         dataset: ClientDataset | None = None) -> ClientDataset:
    """Simulate one split of a client's data, appending to ``dataset`` if given."""
    if split not in ("train", "test"):
        raise ValueError(f"split must be train or test, got {split!r}")
    if registry is not None and split == "train":
        registry.claim(client_id, patient_seeds)
    ds = dataset if dataset is not None else ClientDataset(client_id, protocol)
    if ds.protocol != protocol:
        raise ValueError("all samples of a client must share its protocol")
    fov = image_size * protocol.pl
    for pseed in patient_seeds:
        for z, ph in enumerate(generate_patient(pseed, body_part_for(pseed),
                                                slices_per_patient, fov_mm=fov)):
            ref, low, meta = simulate_slice(ph, protocol, image_size,
                                            _slice_seed(noise_seed, pseed, z), noise)
            ds.samples.append(Sample(low, ref, meta, int(pseed), z, split))
    return ds


MANIFEST_FIELDS = ("sample_id", "patient_seed", "slice_index", "split", "body_part")


def save_dataset(ds: ClientDataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_protocols(d / "protocol.csv", [ds.protocol])
    anatomy = {}
    with open(d / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for i, s in enumerate(ds.samples):
            sid = f"s{i:05d}"
            w.writerow([sid, s.patient_seed, s.slice_index, s.split, s.metadata.body_part])
            ctphys.save_raw(d / f"{sid}_low.raw", s.low_dose.data)
            ctphys.save_raw(d / f"{sid}_ref.raw", s.reference.data)
            anatomy[sid] = {"tissue_fractions": s.metadata.tissue_fractions,
                            "lesion_count": s.metadata.lesion_count}
    (d / "client.json").write_text(json.dumps(
        {"client_id": ds.client_id, "anatomy": anatomy}, indent=1, sort_keys=True))


def load_dataset(directory) -> ClientDataset:
    d = Path(directory)
    info = json.loads((d / "client.json").read_text())
    (protocol,) = load_protocols(d / "protocol.csv")
    ds = ClientDataset(int(info["client_id"]), protocol)
    with open(d / "manifest.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            sid = row["sample_id"]
            anat = info["anatomy"][sid]
            meta = AnatomyMetadata(row["body_part"], dict(anat["tissue_fractions"]),
                                   int(anat["lesion_count"]))
            ds.samples.append(Sample(
                ImageGrid(ctphys.load_raw(d / f"{sid}_low.raw"), protocol.pl),
                ImageGrid(ctphys.load_raw(d / f"{sid}_ref.raw"), protocol.pl),
                meta, int(row["patient_seed"]), int(row["slice_index"]), row["split"]))
    return ds
