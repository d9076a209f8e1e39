"""Synthetic corpora, manifests, train/test splits and preprocessing."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .bvh_io import BvhError, parse_bvh, write_bvh
from .motion import theta_from_pose_sequence
from .skeleton import (
    CanonConfig,
    CanonicalizationRejected,
    PoseSequence,
    Skeleton,
    canonicalize,
    document_to_motion,
    motion_to_document,
)
from .bvh_io import euler_to_matrix_batch

log = logging.getLogger(__name__)

LIMB_WORDS = ["spine", "neck", "head", "jaw", "tail", "shoulder", "arm", "forearm", "hand", "finger",
              "hip", "thigh", "shin", "foot", "toe", "wing", "ear", "antenna", "fin", "horn"]
SIDES = ["Left", "Right", ""]


# --------------------------------------------------------------- synthesis

def random_skeleton(rng: np.random.Generator, num_joints: int, scale: float = 30.0) -> Skeleton:
    """Random articulated tree built from limb chains with anatomical names."""
    if num_joints < 1:
        raise ValueError("need at least one joint")
    names = ["Hips"]
    parents = [-1]
    offsets = [np.array([0.0, scale * rng.uniform(2.0, 4.0), 0.0])]
    used = {"Hips"}
    while len(parents) < num_joints:
        # limbs hang mostly off the root and the first few joints
        anchor = int(rng.integers(0, min(len(parents), 4)))
        word = LIMB_WORDS[int(rng.integers(len(LIMB_WORDS)))]
        side = SIDES[int(rng.integers(len(SIDES)))]
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        chain = int(rng.integers(1, 5))
        prev = anchor
        for k in range(min(chain, num_joints - len(parents))):
            base = f"{side}{word.capitalize()}{k + 1 if chain > 1 else ''}"
            name, n = base, 2
            while name in used:
                name, n = f"{base}_{n}", n + 1
            used.add(name)
            bend = direction + 0.3 * rng.normal(size=3)
            bend /= np.linalg.norm(bend)
            names.append(name)
            parents.append(prev)
            offsets.append(bend * scale * rng.uniform(0.5, 1.5))
            prev = len(parents) - 1
    children = {p for p in parents if p >= 0}
    end_sites = [(j, offsets[j] * 0.3) for j in range(1, num_joints) if j not in children]
    return Skeleton(names, parents, np.array(offsets), end_sites)


def random_motion(skel: Skeleton, num_frames: int, rng: np.random.Generator, frame_time: float = 1 / 30,
                  max_angle: float = 35.0) -> PoseSequence:
    """Superposed sinusoidal joint rotations plus a smooth root trajectory."""
    t = np.arange(num_frames) * frame_time
    J = skel.num_joints
    angles = np.zeros((num_frames, J, 3))
    for j in range(J):
        for axis in range(3):
            for _ in range(2):
                amp = rng.uniform(0, max_angle / 2)
                freq = rng.uniform(0.2, 1.5)
                phase = rng.uniform(0, 2 * np.pi)
                angles[:, j, axis] += amp * np.sin(2 * np.pi * freq * t + phase)
    rots = euler_to_matrix_batch(angles.reshape(-1, 3), "XYZ").reshape(num_frames, J, 3, 3)
    speed = rng.uniform(0, 1.0) * np.linalg.norm(skel.rest_offsets[0])
    heading = rng.uniform(0, 2 * np.pi)
    root = np.tile(skel.rest_offsets[0], (num_frames, 1))
    root[:, 0] += speed * t * np.cos(heading)
    root[:, 2] += speed * t * np.sin(heading)
    root[:, 1] += 0.05 * np.linalg.norm(skel.rest_offsets[0]) * np.sin(2 * np.pi * rng.uniform(0.5, 2) * t)
    return PoseSequence(root, rots)


# ---------------------------------------------------------------- manifest

MANIFEST_HEADER = "#bvhtok-manifest\tv1"
MANIFEST_COLUMNS = ["path", "family", "split", "sha256", "annotation"]
SPLITS = ("train", "test", "")


@dataclass
class ManifestEntry:
    path: str
    family: str
    split: str = ""
    sha256: str = ""
    annotation: str = ""


@dataclass
class CorpusManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path = Path(".")

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def validate(self, check_files: bool = True) -> None:
        seen = set()
        for e in self.entries:
            if e.path in seen:
                raise ValueError(f"duplicate manifest path {e.path!r}")
            seen.add(e.path)
            if e.split not in SPLITS:
                raise ValueError(f"invalid split tag {e.split!r} for {e.path!r}")
            if check_files and not self.resolve(e).exists():
                raise FileNotFoundError(f"manifest entry {e.path!r} does not exist")

    def families(self) -> list[str]:
        return sorted({e.family for e in self.entries})

    def with_split(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(manifest: CorpusManifest, path) -> None:
    lines = [MANIFEST_HEADER, "\t".join(MANIFEST_COLUMNS)]
    for e in manifest.entries:
        fields = [e.path, e.family, e.split, e.sha256, e.annotation]
        if any("\t" in f or "\n" in f for f in fields):
            raise ValueError(f"manifest field for {e.path!r} contains a tab or newline")
        lines.append("\t".join(fields))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path, check_files: bool = True) -> CorpusManifest:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise ValueError(f"{path}: missing manifest header {MANIFEST_HEADER!r}")
    if len(lines) < 2 or lines[1].split("\t") != MANIFEST_COLUMNS:
        raise ValueError(f"{path}: unexpected manifest columns")
    entries = []
    for n, line in enumerate(lines[2:], 3):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != len(MANIFEST_COLUMNS):
            raise ValueError(f"{path}:{n}: expected {len(MANIFEST_COLUMNS)} fields, got {len(parts)}")
        entries.append(ManifestEntry(*parts))
    m = CorpusManifest(entries, path.parent)
    m.validate(check_files)
    return m


# ------------------------------------------------------------------ corpus

@dataclass
class SynthConfig:
    families: int = 3
    sequences_per_family: int = 4
    min_joints: int = 4
    max_joints: int = 24
    min_frames: int = 96
    max_frames: int = 160
    frame_time: float = 1 / 30


def synth_corpus(out_dir, seed: int, config: Optional[SynthConfig] = None) -> CorpusManifest:
    """Write procedurally animated random skeletons as BVH files plus a manifest."""
    cfg = config or SynthConfig()
    if cfg.families < 1 or cfg.sequences_per_family < 1:
        raise ValueError("families and sequences_per_family must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for f in range(cfg.families):
        J = int(rng.integers(cfg.min_joints, cfg.max_joints + 1))
        skel = random_skeleton(rng, J)
        family = f"family{f:02d}"
        for s in range(cfg.sequences_per_family):
            T = int(rng.integers(cfg.min_frames, cfg.max_frames + 1))
            poses = random_motion(skel, T, rng, cfg.frame_time)
            doc = motion_to_document(skel, poses, cfg.frame_time)
            name = f"{family}_seq{s:02d}.bvh"
            text = write_bvh(doc)
            (out / name).write_text(text, encoding="utf-8")
            entries.append(ManifestEntry(name, family, "", hashlib.sha256(text.encode()).hexdigest(),
                                         f"{family} procedural motion {s}"))
    manifest = CorpusManifest(entries, out)
    write_manifest(manifest, out / "manifest.tsv")
    return manifest


def split_manifest(manifest: CorpusManifest, test_ratio: float = 0.15, seed: int = 0,
                   family_coverage: bool = True) -> CorpusManifest:
    """Seeded split; ``round(N * test_ratio)`` test entries (halves round up).

    With ``family_coverage`` every family gets at least one test entry, which
    raises the test count to the number of families when the ratio gives fewer.
    """
    if not 0.0 <= test_ratio <= 1.0:
        raise ValueError("test ratio must be in [0, 1]")
    N = len(manifest.entries)
    n_test = int(np.floor(N * test_ratio + 0.5))
    rng = np.random.default_rng(seed)
    test: set[int] = set()
    if family_coverage:
        fams = manifest.families()
        if n_test < len(fams):
            log.warning("test ratio %.3g gives %d test entries for %d families; using %d",
                        test_ratio, n_test, len(fams), len(fams))
            n_test = len(fams)
        for fam in fams:
            idx = [i for i, e in enumerate(manifest.entries) if e.family == fam]
            if len(idx) < 2 and N > 1:
                raise ValueError(f"family {fam!r} has a single sequence; cannot place it in both splits")
            test.add(int(rng.choice(idx)))
    rest = [i for i in range(N) if i not in test]
    extra = rng.permutation(len(rest))[: n_test - len(test)]
    test.update(rest[int(i)] for i in extra)
    entries = [replace(e, split="test" if i in test else "train") for i, e in enumerate(manifest.entries)]
    return CorpusManifest(entries, manifest.root)


# ------------------------------------------------------------- preprocess

@dataclass
class Rejection:
    path: str
    step: str
    reason: str


@dataclass
class PreprocessResult:
    manifest: CorpusManifest
    rejections: list[Rejection]


def preprocess_file(text: str, config: CanonConfig) -> tuple[str, np.ndarray, float]:
    """Canonical BVH text plus the Θ array derived from re-reading that text."""
    doc = parse_bvh(text)
    canon = canonicalize(doc, config)
    out_text = write_bvh(motion_to_document(canon.skeleton, canon.poses, canon.frame_time))
    # features come from the written file so a second pass sees identical input
    skel, poses = document_to_motion(parse_bvh(out_text), config)
    theta = theta_from_pose_sequence(skel, poses, canon.frame_time)
    return out_text, theta.data, canon.frame_time


def preprocess(manifest: CorpusManifest, out_dir, config: Optional[CanonConfig] = None) -> PreprocessResult:
    config = config or CanonConfig(scale_tolerance=1e-4)
    out = Path(out_dir)
    (out / "bvh").mkdir(parents=True, exist_ok=True)
    (out / "theta").mkdir(parents=True, exist_ok=True)
    entries, rejections = [], []
    for e in manifest.entries:
        src = manifest.resolve(e)
        try:
            text = src.read_text(encoding="utf-8")
            out_text, theta, ft = preprocess_file(text, config)
        except (OSError, UnicodeDecodeError) as exc:
            rejections.append(Rejection(e.path, "read", str(exc)))
            continue
        except BvhError as exc:
            rejections.append(Rejection(e.path, "parse", str(exc)))
            continue
        except CanonicalizationRejected as exc:
            rejections.append(Rejection(e.path, exc.step, exc.reason))
            continue
        name = Path(e.path).name
        (out / "bvh" / name).write_text(out_text, encoding="utf-8")
        np.save(out / "theta" / (Path(name).stem + ".npy"), theta)
        entries.append(replace(e, path=f"bvh/{name}", sha256=hashlib.sha256(out_text.encode()).hexdigest()))
    result = CorpusManifest(entries, out)
    write_manifest(result, out / "manifest.tsv")
    write_rejections(rejections, out / "rejections.tsv")
    log.info("preprocess: %d accepted, %d rejected", len(entries), len(rejections))
    return PreprocessResult(result, rejections)


def write_rejections(rejections: Sequence[Rejection], path) -> None:
    lines = ["path\tstep\treason"]
    lines += [f"{r.path}\t{r.step}\t{' '.join(r.reason.split())}" for r in rejections]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_motion(path, config: Optional[CanonConfig] = None) -> tuple[Skeleton, PoseSequence, float]:
    """Read an (already canonical) BVH file as skeleton, poses and frame time."""
    doc = parse_bvh(Path(path).read_text(encoding="utf-8"))
    skel, poses = document_to_motion(doc, config)
    return skel, poses, doc.frame_time
