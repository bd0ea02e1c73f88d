"""Deterministic synthetic image-report pairs with known latent structure.

Each image is a quadrant grid over a faint shared low-frequency
background: an occupied quadrant holds one 8x8 glyph whose shape encodes
the finding class and whose intensity encodes severity.  Mirroring how
observation types tie to anatomical sites, each finding class has a home
region (class k lives in region k), so presence of a class and occupancy
of its region coincide.  The paired report has one sentence per glyph
(region word, finding word, severity word, optional filler), with
sentence order shuffled independently of region order so a sentence
describing a region can sit anywhere in the report.  Everything is a
pure function of (seed, world), which makes splits reproducible and lets
ground-truth labels stand in for keyword matching during evaluation.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError, ContractError

CLS_ID = 0

SEVERITY_INTENSITY = (0.4, 0.7, 1.0)

# 8x8 binary glyph templates, one per finding class: cross, disc, bar, ring.
_CROSS = np.zeros((8, 8))
_CROSS[3:5, :] = 1.0
_CROSS[:, 3:5] = 1.0
_DISC = np.zeros((8, 8))
_yy, _xx = np.mgrid[0:8, 0:8]
_DISC[(_yy - 3.5) ** 2 + (_xx - 3.5) ** 2 <= 3.5 ** 2] = 1.0
_BAR = np.zeros((8, 8))
_BAR[1:7, 2:6] = 1.0
_RING = np.zeros((8, 8))
_d2 = (_yy - 3.5) ** 2 + (_xx - 3.5) ** 2
_RING[(_d2 <= 3.5 ** 2) & (_d2 >= 1.5 ** 2)] = 1.0
GLYPHS = (_CROSS, _DISC, _BAR, _RING)


@dataclass(frozen=True)
class WorldSpec:
    n_pathologies: int = 4
    n_regions: int = 4
    severity_levels: int = 3
    image_side: int = 32
    noise_sigma: float = 0.05
    n_filler_words: int = 8
    max_filler_per_sentence: int = 3

    def __post_init__(self):
        if self.n_pathologies < 1 or self.n_pathologies > len(GLYPHS):
            raise ConfigError(f"n_pathologies must be in [1, {len(GLYPHS)}]")
        grid = int(round(self.n_regions ** 0.5))
        if grid * grid != self.n_regions:
            raise ConfigError("n_regions must be a perfect square")
        if self.n_pathologies != self.n_regions:
            raise ConfigError("each finding class needs exactly one home region")
        if self.severity_levels < 1 or self.severity_levels > len(SEVERITY_INTENSITY):
            raise ConfigError(f"severity_levels must be in [1, {len(SEVERITY_INTENSITY)}]")
        if self.image_side % grid != 0 or self.image_side // grid < 8:
            raise ConfigError("each region must be at least 8 pixels square")

    # vocabulary: dense ids starting at 1 (0 is CLS), grouped by word kind
    @property
    def region_base(self) -> int:
        return 1

    @property
    def pathology_base(self) -> int:
        return self.region_base + self.n_regions

    @property
    def severity_base(self) -> int:
        return self.pathology_base + self.n_pathologies

    @property
    def filler_base(self) -> int:
        return self.severity_base + self.severity_levels

    @property
    def vocab_size(self) -> int:
        return self.filler_base + self.n_filler_words

    @property
    def grid_side(self) -> int:
        return int(round(self.n_regions ** 0.5))

    @property
    def region_pixels(self) -> int:
        return self.image_side // self.grid_side

    @property
    def max_report_len(self) -> int:
        return 1 + self.n_regions * (3 + self.max_filler_per_sentence)


@dataclass
class SyntheticPair:
    image: np.ndarray                       # [image_side, image_side] in [0, 1]
    tokens: list[int]                       # CLS at position 0
    spans: list[tuple[int, int]]            # one per sentence, covering tokens[1:]
    labels: list[tuple[int, int, int]]      # (region, pathology, severity), region-sorted
    seed: int = 0

    def pathology_set(self) -> set[int]:
        return {p for _, p, _ in self.labels}


def spec_hash(spec: WorldSpec) -> bytes:
    canon = ",".join(f"{f.name}={getattr(spec, f.name)!r}" for f in fields(spec))
    return hashlib.sha256(canon.encode()).digest()


def region_box(spec: WorldSpec, region: int) -> tuple[int, int]:
    """Top-left pixel of a region's quadrant."""
    r, c = divmod(region, spec.grid_side)
    return r * spec.region_pixels, c * spec.region_pixels


def glyph_box(spec: WorldSpec, region: int) -> tuple[int, int]:
    """Top-left pixel of the 8x8 glyph centered in its region."""
    y0, x0 = region_box(spec, region)
    off = (spec.region_pixels - 8) // 2
    return y0 + off, x0 + off


def generate_pair(seed: int, spec: WorldSpec) -> SyntheticPair:
    """Deterministic pair for a 64-bit seed."""
    rng = np.random.default_rng(seed)
    n_sentences = int(rng.integers(1, spec.n_regions + 1))
    regions = np.sort(rng.choice(spec.n_regions, size=n_sentences, replace=False))
    # finding class k occupies its home region k; severity varies freely
    labels = [(int(r), int(r), int(rng.integers(spec.severity_levels))) for r in regions]

    side = spec.image_side
    # low-frequency background shared across quadrants; vanishes with the noise
    base = rng.uniform(1.0, 2.0) * spec.noise_sigma
    amp = rng.uniform(0.5, 1.5) * spec.noise_sigma
    phase_y, phase_x = rng.uniform(0.0, 2 * np.pi, size=2)
    yy, xx = np.mgrid[0:side, 0:side] * (2 * np.pi / side)
    image = base + amp * np.sin(yy + phase_y) * np.sin(xx + phase_x)
    for region, pathology, severity in labels:
        gy, gx = glyph_box(spec, region)
        image[gy:gy + 8, gx:gx + 8] += SEVERITY_INTENSITY[severity] * GLYPHS[pathology]
    if spec.noise_sigma > 0:
        image += rng.normal(0.0, spec.noise_sigma, size=(side, side))
    image = np.clip(image, 0.0, 1.0)

    order = rng.permutation(n_sentences)  # sentence order independent of region order
    tokens: list[int] = [CLS_ID]
    spans: list[tuple[int, int]] = []
    for k in order:
        region, pathology, severity = labels[k]
        start = len(tokens)
        tokens += [spec.region_base + region, spec.pathology_base + pathology, spec.severity_base + severity]
        n_filler = int(rng.integers(0, spec.max_filler_per_sentence + 1))
        for _ in range(n_filler):
            tokens.append(spec.filler_base + int(rng.integers(spec.n_filler_words)))
        spans.append((start, len(tokens)))

    return SyntheticPair(image=image, tokens=tokens, spans=spans, labels=labels, seed=seed)


def decode_report(tokens: list[int], spans: list[tuple[int, int]], spec: WorldSpec) -> list[tuple[int, int, int]]:
    """Recover (region, pathology, severity) labels from the token stream."""
    labels = []
    for start, stop in spans:
        sent = tokens[start:stop]
        if len(sent) < 3:
            raise ContractError("sentence too short to decode")
        region = sent[0] - spec.region_base
        pathology = sent[1] - spec.pathology_base
        severity = sent[2] - spec.severity_base
        if not (0 <= region < spec.n_regions and 0 <= pathology < spec.n_pathologies
                and 0 <= severity < spec.severity_levels):
            raise ContractError("sentence does not start with region/pathology/severity words")
        labels.append((region, pathology, severity))
    return sorted(labels)


def make_split(n_train: int, n_val: int, n_test: int, base_seed: int, spec: WorldSpec):
    """Three disjoint datasets from consecutive seed ranges."""
    if min(n_train, n_val, n_test) < 1:
        raise ContractError("every split needs at least one sample")
    train = [generate_pair(base_seed + i, spec) for i in range(n_train)]
    val = [generate_pair(base_seed + n_train + i, spec) for i in range(n_val)]
    test = [generate_pair(base_seed + n_train + n_val + i, spec) for i in range(n_test)]
    return train, val, test


def make_single_finding_corpus(n_per_class: int, base_seed: int, spec: WorldSpec,
                               max_scan: int = 500_000) -> list[SyntheticPair]:
    """Pairs with exactly one sentence, n_per_class for each finding class.

    Scans seeds upward from base_seed and keeps qualifying pairs, so the
    corpus is deterministic and disjoint from any split that uses a
    different seed range.
    """
    want = {p: n_per_class for p in range(spec.n_pathologies)}
    corpus: list[SyntheticPair] = []
    seed = base_seed
    while any(want.values()):
        if seed - base_seed >= max_scan:
            raise ContractError("seed scan exhausted before filling the corpus")
        pair = generate_pair(seed, spec)
        if len(pair.labels) == 1:
            pathology = pair.labels[0][1]
            if want[pathology] > 0:
                want[pathology] -= 1
                corpus.append(pair)
        seed += 1
    return corpus


# ---------------------------------------------------------------------------
# dataset files: header (magic, version, image side, count, spec hash) then
# length-prefixed records, all little-endian

_MAGIC = b"SYPR"
_VERSION = 1


def write_dataset(path, pairs: list[SyntheticPair], spec: WorldSpec) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<HHI", _VERSION, spec.image_side, len(pairs)))
        fh.write(spec_hash(spec))
        for pair in pairs:
            body = bytearray()
            body += pair.image.astype("<f4").tobytes()
            body += struct.pack("<H", len(pair.tokens))
            body += np.asarray(pair.tokens, dtype="<u2").tobytes()
            body += struct.pack("<B", len(pair.spans))
            for start, stop in pair.spans:
                body += struct.pack("<HH", start, stop)
            body += struct.pack("<B", len(pair.labels))
            for region, pathology, severity in pair.labels:
                body += struct.pack("<BBB", region, pathology, severity)
            body += struct.pack("<q", pair.seed)
            fh.write(struct.pack("<I", len(body)))
            fh.write(bytes(body))


def read_dataset(path, spec: WorldSpec | None = None) -> list[SyntheticPair]:
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGIC:
        raise CheckpointError(f"bad dataset magic in {path}")
    version, side, count = struct.unpack_from("<HHI", blob, 4)
    if version != _VERSION:
        raise CheckpointError(f"unsupported dataset version {version}")
    stored_hash = blob[12:44]
    if spec is not None and stored_hash != spec_hash(spec):
        raise CheckpointError("dataset was generated under a different world spec")
    pos = 44
    pairs = []
    for _ in range(count):
        (body_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        body = blob[pos:pos + body_len]
        if len(body) != body_len:
            raise CheckpointError("truncated dataset record")
        pos += body_len
        off = 0
        image = np.frombuffer(body, dtype="<f4", count=side * side).astype(np.float64).reshape(side, side)
        off += 4 * side * side
        (n_tok,) = struct.unpack_from("<H", body, off)
        off += 2
        tokens = np.frombuffer(body, dtype="<u2", count=n_tok, offset=off).astype(int).tolist()
        off += 2 * n_tok
        (n_spans,) = struct.unpack_from("<B", body, off)
        off += 1
        spans = []
        for _ in range(n_spans):
            start, stop = struct.unpack_from("<HH", body, off)
            spans.append((start, stop))
            off += 4
        (n_labels,) = struct.unpack_from("<B", body, off)
        off += 1
        labels = []
        for _ in range(n_labels):
            region, pathology, severity = struct.unpack_from("<BBB", body, off)
            labels.append((region, pathology, severity))
            off += 3
        (seed,) = struct.unpack_from("<q", body, off)
        pairs.append(SyntheticPair(image=image, tokens=tokens, spans=spans, labels=labels, seed=seed))
    return pairs
