"""Procedural generator for the desk-scale chest-study corpus.

Each study is a 32x32 grayscale image whose present findings are encoded
as fixed motifs in disjoint grid cells, a template report that mentions
every present finding (and negates a couple of absent ones), a four-token
instruction prompt, and the ground-truth 14-way findings vector. All
randomness flows from one corpus seed through per-study child seeds that
are stored in the manifest, so every artifact is reproducible from its
manifest line.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import lexicon
from .lexicon import CATALOG, NO_FINDING_INDEX, RARE_INDICES
from .vocab import TokenSeq, Vocabulary, EOS

IMAGE_SIZE = 32
BASE_MEAN = 0.10
BASE_SIGMA = 0.05
CELL = 8          # grid cell edge; motifs stay inside a 6x6 box per cell
MAX_PRESENT = 5

ROTATION_LIMIT_DEG = 5.0
SCALE_RANGE = (0.95, 1.05)
NOISE_SIGMA_LIMIT = 0.05


class ConfigurationError(ValueError):
    """A knob was set outside its documented range."""


@dataclass(frozen=True)
class FindingsVector:
    """14 present/absent labels; indices 0-4 are the critical subset."""

    flags: tuple[bool, ...]

    def __post_init__(self):
        if len(self.flags) != len(CATALOG):
            raise ValueError(f"need {len(CATALOG)} flags, got {len(self.flags)}")

    @classmethod
    def from_indices(cls, present) -> "FindingsVector":
        s = set(present)
        return cls(tuple(i in s for i in range(len(CATALOG))))

    @classmethod
    def from_bitmask(cls, mask: int) -> "FindingsVector":
        return cls(tuple(bool(mask >> i & 1) for i in range(len(CATALOG))))

    def bitmask(self) -> int:
        return sum(1 << i for i, f in enumerate(self.flags) if f)

    def present_indices(self) -> tuple[int, ...]:
        return tuple(i for i, f in enumerate(self.flags) if f)

    def __getitem__(self, i: int) -> bool:
        return self.flags[i]


@dataclass(frozen=True)
class StudyImage:
    """Grayscale pixels in [0,1], quantized to 8-bit levels."""

    pixels: np.ndarray
    study_id: str = ""

    def __post_init__(self):
        p = self.pixels
        if p.shape != (IMAGE_SIZE, IMAGE_SIZE):
            raise ValueError(f"expected {IMAGE_SIZE}x{IMAGE_SIZE} image, got {p.shape}")
        if p.min() < 0.0 or p.max() > 1.0:
            raise ValueError("pixels outside [0,1]")


@dataclass(frozen=True)
class SyntheticStudy:
    study_id: str
    seed: int
    findings: FindingsVector
    image: StudyImage
    report: TokenSeq      # content words + trailing EOS
    prompt: TokenSeq      # four content words
    split: str


def _quantize(p: np.ndarray) -> np.ndarray:
    """Snap to the 256 representable graymap levels (makes PGM round trips exact)."""
    return np.round(np.clip(p, 0.0, 1.0) * 255.0) / 255.0


def motif_mask(index: int) -> np.ndarray:
    """Boolean pixel mask of finding ``index``'s motif (inside its grid cell)."""
    f = CATALOG[index]
    r, c = f.cell
    y0, x0 = r * CELL + 1, c * CELL + 1
    box = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
    yy, xx = np.mgrid[0:6, 0:6]
    cy = cx = 2.5
    shapes = {
        "disc": (yy - cy) ** 2 + (xx - cx) ** 2 <= 2.5 ** 2,
        "rect": np.ones((6, 6), dtype=bool),
        "cross": (np.abs(yy - cy) <= 0.6) | (np.abs(xx - cx) <= 0.6),
        "ring": ((yy - cy) ** 2 + (xx - cx) ** 2 <= 2.5 ** 2)
                & ((yy - cy) ** 2 + (xx - cx) ** 2 >= 1.2 ** 2),
        "hbar": np.abs(yy - cy) <= 1.0,
        "vbar": np.abs(xx - cx) <= 1.0,
        "diag": np.abs(yy - xx) <= 1,
        "checker": (yy + xx) % 2 == 0,
        "wedge": yy >= xx,
        "vwedge": yy <= xx,
        "blob": np.abs(yy - cy) + np.abs(xx - cx) <= 3,
        "dot": (np.abs(yy - cy) <= 1.0) & (np.abs(xx - cx) <= 1.0),
        "frame": (yy == 0) | (yy == 5) | (xx == 0) | (xx == 5),
        "tick": ((xx <= 1) & (yy >= 2)) | ((yy >= 4) & (xx <= 3)),
    }
    box[y0:y0 + 6, x0:x0 + 6] = shapes[f.motif]
    return box


def motif_bbox(index: int) -> tuple[int, int, int, int]:
    """(y0, x0, y1, x1) bounding box that motif ``index`` may touch."""
    r, c = CATALOG[index].cell
    return (r * CELL + 1, c * CELL + 1, r * CELL + 7, c * CELL + 7)


def render(findings: FindingsVector, seed: int) -> StudyImage:
    """Base noise texture plus one additive motif per present finding.

    The texture is a seeded Gaussian field (sigma 0.05) sampled on an 8x8
    grid and bilinearly upsampled, so it is smooth enough that bilinear
    perturbations nearly invert.
    """
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 1)))
    field = ndimage.zoom(rng.standard_normal((8, 8)), IMAGE_SIZE // 8, order=1)
    pixels = BASE_MEAN + BASE_SIGMA * field
    for i in findings.present_indices():
        pixels = pixels + CATALOG[i].intensity * motif_mask(i)
    return StudyImage(_quantize(pixels))


def detect_findings_from_image(image: StudyImage, threshold: float = 0.30) -> FindingsVector:
    """Pixel-threshold oracle: a motif is present iff its pixels are bright."""
    present = [i for i in range(len(CATALOG))
               if float(image.pixels[motif_mask(i)].mean()) > threshold]
    return FindingsVector.from_indices(present)


def write_prompt(seed: int, vocab: Vocabulary) -> TokenSeq:
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 3)))
    text = lexicon.PROMPT_TEMPLATES[int(rng.integers(len(lexicon.PROMPT_TEMPLATES)))]
    return vocab.encode_text(text)


def licensed_regions(index: int) -> tuple[str, ...]:
    """Home region plus the extra zones the graph licenses for a finding."""
    f = CATALOG[index]
    return (f.region,) + lexicon.EXTRA_REGIONS.get(f.name, ())


def write_report(findings: FindingsVector, seed: int, vocab: Vocabulary) -> TokenSeq:
    """Template report: one sentence per present finding plus 1-2 negations.

    Location-bearing templates name a seeded choice among the finding's
    licensed regions. Terminated by EOS. Deterministic in (findings, seed).
    """
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 2)))
    sentences: list[str] = []
    present = findings.present_indices()
    for i in present:
        f = CATALOG[i]
        choices = list(lexicon.PRESENT_TEMPLATES)
        if not f.synonyms:
            choices = [t for t in choices if "{syn}" not in t]
        tpl = choices[int(rng.integers(len(choices)))]
        syn = f.synonyms[int(rng.integers(len(f.synonyms)))] if f.synonyms else f.name
        zones = licensed_regions(i)
        region = zones[int(rng.integers(len(zones)))]
        sentences.append(tpl.format(term=f.name, region=region, syn=syn))
    if not present:
        sentences.append(lexicon.EMPTY_REPORT_SENTENCE)
    absent_real = [i for i in range(len(CATALOG))
                   if not findings[i] and i != NO_FINDING_INDEX]
    n_neg = int(rng.integers(1, 3))
    pick = rng.choice(len(absent_real), size=min(n_neg, len(absent_real)), replace=False)
    for j in sorted(int(p) for p in pick):
        f = CATALOG[absent_real[j]]
        tpl = lexicon.ABSENT_TEMPLATES[int(rng.integers(len(lexicon.ABSENT_TEMPLATES)))]
        sentences.append(tpl.format(term=f.name))
    ids = vocab.encode_text(" ".join(sentences)).ids + (EOS,)
    return TokenSeq(ids)


def sample_findings(seed: int) -> FindingsVector:
    """Independent Bernoulli draws with the catalog marginals, then the
    generator constraints: pneumothorax suppresses pleural-effusion, at
    most five findings stay present (rare ones kept preferentially), and
    the no-finding marker is set iff nothing else is.
    """
    return _sample_with_rates(seed, {})


# ---------------------------------------------------------------------------
# graymap files


def save_pgm(image: StudyImage, path) -> None:
    levels = np.round(image.pixels * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{levels.shape[1]} {levels.shape[0]}\n255\n".encode("ascii"))
        fh.write(levels.tobytes())


def load_pgm(path) -> StudyImage:
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    pos += 1  # single whitespace after maxval
    if magic == b"P5":
        levels = np.frombuffer(raw[pos:pos + w * h], dtype=np.uint8).reshape(h, w)
    elif magic == b"P2":
        levels = np.array(raw[pos:].split()[: w * h], dtype=np.uint8).reshape(h, w)
    else:
        raise ValueError(f"{path}: not a portable graymap (magic {magic!r})")
    return StudyImage(levels.astype(np.float64) / float(maxval))


# ---------------------------------------------------------------------------
# perturbations


def perturb(image: StudyImage, kind: str, magnitude: float, seed: int = 0) -> StudyImage:
    """Controlled input perturbation: rotation (deg), scaling (factor), or
    additive Gaussian noise (sigma). Resampling is bilinear about the image
    center with base-intensity edge padding.
    """
    p = image.pixels
    if kind == "rotation":
        if abs(magnitude) > ROTATION_LIMIT_DEG:
            raise ConfigurationError(f"rotation {magnitude} exceeds +-{ROTATION_LIMIT_DEG} deg")
        if magnitude == 0:
            return StudyImage(p.copy(), image.study_id)
        out = ndimage.rotate(p, magnitude, reshape=False, order=1,
                             mode="constant", cval=BASE_MEAN)
    elif kind == "scaling":
        if not SCALE_RANGE[0] <= magnitude <= SCALE_RANGE[1]:
            raise ConfigurationError(f"scale {magnitude} outside {SCALE_RANGE}")
        if magnitude == 1.0:
            return StudyImage(p.copy(), image.study_id)
        center = (IMAGE_SIZE - 1) / 2.0
        m = 1.0 / magnitude
        out = ndimage.affine_transform(p, np.diag([m, m]),
                                       offset=center * (1 - m), order=1,
                                       mode="constant", cval=BASE_MEAN)
    elif kind == "noise":
        if not 0.0 <= magnitude <= NOISE_SIGMA_LIMIT:
            raise ConfigurationError(f"noise sigma {magnitude} outside [0, {NOISE_SIGMA_LIMIT}]")
        if magnitude == 0:
            return StudyImage(p.copy(), image.study_id)
        rng = np.random.default_rng(np.random.SeedSequence((int(seed), 4)))
        out = p + magnitude * rng.standard_normal(p.shape)
    else:
        raise ConfigurationError(f"unknown perturbation kind {kind!r}")
    return StudyImage(_quantize(out), image.study_id)


PERTURBATION_KINDS = ("rotation", "scaling", "noise")


# ---------------------------------------------------------------------------
# corpus assembly


@dataclass
class Corpus:
    seed: int
    studies: list[SyntheticStudy]

    def split(self, name: str) -> list[SyntheticStudy]:
        return [s for s in self.studies if s.split == name]

    def by_id(self, study_id: str) -> SyntheticStudy:
        for s in self.studies:
            if s.study_id == study_id:
                return s
        raise KeyError(study_id)


def _split_of(i: int, n: int) -> str:
    if i < int(n * 0.8):
        return "train"
    if i < int(n * 0.9):
        return "val"
    return "test"


def build_corpus(n: int, seed: int, vocab: Vocabulary,
                 rare_rate: float = 0.004, out_dir=None) -> Corpus:
    """Generate ``n`` studies with an 80/10/10 split.

    ``rare_rate`` overrides the marginal of the two designated rare
    findings. When ``out_dir`` is given, images, reports, the vocabulary
    and the manifest are written there.
    """
    if n < 100:
        raise ValueError(f"corpus size {n} below the minimum of 100")
    if n * rare_rate < 1:
        warnings.warn(f"n={n} is unlikely to contain a rare finding", stacklevel=2)

    marg_patch = {i: rare_rate for i in RARE_INDICES}
    root = np.random.SeedSequence(int(seed))
    child_seeds = [int(s.generate_state(1)[0]) for s in root.spawn(n)]

    studies: list[SyntheticStudy] = []
    for i, s_i in enumerate(child_seeds):
        findings = _sample_with_rates(s_i, marg_patch)
        image = render(findings, s_i)
        studies.append(SyntheticStudy(
            study_id=f"s{i:06d}", seed=s_i, findings=findings,
            image=StudyImage(image.pixels, f"s{i:06d}"),
            report=write_report(findings, s_i, vocab),
            prompt=write_prompt(s_i, vocab), split=_split_of(i, n)))

    corpus = Corpus(seed=int(seed), studies=studies)
    if out_dir is not None:
        _write_corpus(corpus, Path(out_dir), vocab)
    return corpus


def _sample_with_rates(seed: int, marginal_overrides: dict[int, float]) -> FindingsVector:
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0)))
    u = rng.random(len(CATALOG))
    present = set()
    for i in range(len(CATALOG)):
        if i == NO_FINDING_INDEX:
            continue
        m = marginal_overrides.get(i, CATALOG[i].marginal)
        if u[i] < m:
            present.add(i)
    if 5 in present and 4 in present:
        present.discard(4)
    if len(present) > MAX_PRESENT:
        common = sorted(i for i in present if i not in RARE_INDICES)
        drop = rng.permutation(common)[:len(present) - MAX_PRESENT]
        present -= {int(d) for d in drop}
    if not present:
        present = {NO_FINDING_INDEX}
    return FindingsVector.from_indices(present)


def _write_corpus(corpus: Corpus, out_dir: Path, vocab: Vocabulary) -> None:
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "reports").mkdir(parents=True, exist_ok=True)
    vocab.save(out_dir / "vocab.txt")
    label_counts = [0] * len(CATALOG)
    for s in corpus.studies:
        for i in s.findings.present_indices():
            label_counts[i] += 1
    lines = [json.dumps({"corpus_seed": corpus.seed, "n": len(corpus.studies),
                         "label_counts": label_counts}, sort_keys=True)]
    for s in corpus.studies:
        save_pgm(s.image, out_dir / "images" / f"{s.study_id}.pgm")
        words = vocab.decode_text(s.report.ids)
        (out_dir / "reports" / f"{s.study_id}.txt").write_text(
            "\n".join(words.split()) + "\n", encoding="utf-8")
        lines.append(json.dumps({
            "id": s.study_id, "seed": s.seed, "findings": s.findings.bitmask(),
            "split": s.split, "image": f"images/{s.study_id}.pgm",
            "report": f"reports/{s.study_id}.txt"}, sort_keys=True))
    (out_dir / "manifest.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_corpus(corpus_dir, vocab: Vocabulary | None = None) -> tuple[Corpus, Vocabulary]:
    corpus_dir = Path(corpus_dir)
    if vocab is None:
        vocab = Vocabulary.load(corpus_dir / "vocab.txt")
    lines = (corpus_dir / "manifest.jsonl").read_text(encoding="utf-8").splitlines()
    header = json.loads(lines[0])
    studies = []
    for line in lines[1:]:
        rec = json.loads(line)
        findings = FindingsVector.from_bitmask(rec["findings"])
        image = load_pgm(corpus_dir / rec["image"])
        words = (corpus_dir / rec["report"]).read_text(encoding="utf-8").split()
        report = TokenSeq(vocab.encode_words(words).ids + (EOS,))
        studies.append(SyntheticStudy(
            study_id=rec["id"], seed=rec["seed"], findings=findings,
            image=StudyImage(image.pixels, rec["id"]), report=report,
            prompt=write_prompt(rec["seed"], vocab), split=rec["split"]))
    return Corpus(seed=header["corpus_seed"], studies=studies), vocab
