"""The closed synthetic clinical lexicon.

Defines the 14-entry finding catalog (motifs, regions, synonyms, sampling
marginals), the report/prompt template wording, negation cues, and the
decoy terms that parse as findings but are deliberately absent from the
knowledge graph. Everything downstream -- corpus generation, the
vocabulary, assertion parsing, fact checking -- derives from this module
so the pieces cannot drift apart.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Finding:
    """One catalog entry: label semantics plus its image motif."""

    index: int
    name: str
    region: str
    synonyms: tuple[str, ...]   # surface phrases that canonicalize to name
    marginal: float             # sampling probability (index 13 is derived)
    motif: str                  # shape drawn when present
    intensity: float            # additive motif brightness
    cell: tuple[int, int]       # 8x8 grid cell (row, col) holding the motif


# Indices 0-4 are the critical subset; 11 and 12 are the designated rare
# findings (marginal 0.004). no-finding-marker is set by the sampler iff
# nothing else is present, so its marginal field is unused.
CATALOG: tuple[Finding, ...] = (
    Finding(0, "cardiomegaly", "cardiac-silhouette",
            ("enlarged heart", "cardiac-enlargement", "enlarged cardiac silhouette", "cardiac-prominence"),
            0.22, "disc", 0.80, (2, 1)),
    Finding(1, "edema", "right-mid-zone",
            ("fluid-overload", "vascular congestion", "pulmonary edema", "interstitial-edema"),
            0.16, "hbar", 0.60, (1, 0)),
    Finding(2, "consolidation", "left-lower-zone",
            ("airspace-disease", "dense airspace process", "patchy-consolidation"),
            0.14, "rect", 0.90, (3, 2)),
    Finding(3, "atelectasis", "right-lower-zone",
            ("volume-loss", "collapsed lung", "subsegmental-collapse"),
            0.18, "vbar", 0.55, (3, 0)),
    Finding(4, "pleural-effusion", "left-costophrenic-angle",
            ("pleural fluid", "layering effusion", "costophrenic-blunting"),
            0.15, "wedge", 0.85, (3, 3)),
    Finding(5, "pneumothorax", "right-apex",
            ("air-leak", "apical-lucency"),
            0.08, "ring", 0.70, (0, 0)),
    Finding(6, "opacity", "left-mid-zone",
            ("focal opacity", "shadowing", "patchy opacity", "hazy-opacity"),
            0.25, "blob", 0.65, (1, 3)),
    Finding(7, "pneumonia", "right-upper-zone",
            ("infectious process", "airspace infection", "bronchopneumonia"),
            0.12, "checker", 0.75, (0, 1)),
    Finding(8, "fracture", "left-hemithorax",
            ("bony-injury", "rib disruption", "cortical-break"),
            0.10, "diag", 0.95, (2, 3)),
    Finding(9, "support-device", "right-hemithorax",
            ("indwelling-device", "support hardware", "central-line"),
            0.20, "cross", 0.88, (2, 0)),
    Finding(10, "enlarged-mediastinum", "mediastinum",
            ("mediastinal-widening", "wide mediastinum", "mediastinal-prominence"),
            0.09, "vwedge", 0.72, (1, 1)),
    Finding(11, "lung-lesion", "left-upper-zone",
            ("pulmonary-nodule", "mass", "pulmonary-mass"),
            0.004, "dot", 0.92, (0, 2)),
    Finding(12, "pleural-other", "right-costophrenic-angle",
            ("pleural-thickening", "pleural irregularity", "pleural-plaque"),
            0.004, "frame", 0.68, (2, 2)),
    Finding(13, "no-finding-marker", "left-apex",
            ("clear-lungs",),
            0.0, "tick", 0.50, (0, 3)),
)

FINDING_NAMES: tuple[str, ...] = tuple(f.name for f in CATALOG)
FINDING_INDEX: dict[str, int] = {f.name: f.index for f in CATALOG}
CRITICAL_INDICES: tuple[int, ...] = (0, 1, 2, 3, 4)
RARE_INDICES: tuple[int, ...] = (11, 12)
NO_FINDING_INDEX = 13

REGIONS: tuple[str, ...] = tuple(sorted({f.region for f in CATALOG}))

# Zones a finding may legitimately be reported in, beyond its home region.
EXTRA_REGIONS: dict[str, tuple[str, ...]] = {
    "edema": ("left-mid-zone", "right-lower-zone", "left-lower-zone"),
    "consolidation": ("right-lower-zone", "left-mid-zone"),
    "atelectasis": ("left-lower-zone", "right-mid-zone"),
    "pleural-effusion": ("right-costophrenic-angle",),
    "pneumothorax": ("left-apex",),
    "opacity": ("right-mid-zone", "left-lower-zone", "right-upper-zone"),
    "pneumonia": ("left-upper-zone", "right-mid-zone"),
    "fracture": ("right-hemithorax",),
    "support-device": ("left-hemithorax", "mediastinum"),
    "lung-lesion": ("right-upper-zone", "left-mid-zone"),
    "pleural-other": ("left-costophrenic-angle",),
}

# Synonym chain roots: every synonym phrase maps to its canonical finding;
# "pulmonary-mass" additionally resolves through "mass" (a two-step chain
# the graph file encodes explicitly).
CHAINED_SYNONYMS: dict[str, str] = {"pulmonary-mass": "mass"}

# Terms that the parser recognizes as finding-like but the knowledge graph
# does not contain; asserting one trips the closed-world unknown-entity
# verdict.
DECOY_TERMS: tuple[str, ...] = ("gadget", "azygos-lobe", "thymic-shadow")

NEGATION_CUES: tuple[str, ...] = ("no", "without", "absent")
LOCATION_PREPOSITIONS: tuple[str, ...] = ("in", "at")
SENTENCE_END = "."

# Report sentence templates. {term} is the canonical name, {syn} a seeded
# synonym phrase, {region} the finding's home region.
PRESENT_TEMPLATES: tuple[str, ...] = (
    "{term} is present .",
    "there is {term} in {region} .",
    "findings consistent with {term} .",
    "{syn} noted .",
    "{term} seen in {region} .",
)
ABSENT_TEMPLATES: tuple[str, ...] = (
    "no {term} .",
    "no evidence of {term} .",
    "without {term} .",
)
EMPTY_REPORT_SENTENCE = "no acute findings ."

# All prompts are exactly four content tokens so batched decoding can use
# a uniform prefix length.
PROMPT_TEMPLATES: tuple[str, ...] = (
    "describe the chest study",
    "report findings for study",
    "summarize this chest image",
    "assess the chest radiograph",
)


def finding_phrases() -> dict[str, str]:
    """Surface phrase -> canonical finding name, for assertion parsing.

    Includes canonical names, every synonym phrase, and the decoy terms
    (which map to themselves and fail fact checks downstream).
    """
    table: dict[str, str] = {}
    for f in CATALOG:
        table[f.name] = f.name
        for s in f.synonyms:
            table[s] = f.name
    for d in DECOY_TERMS:
        table[d] = d
    return table


def synonym_root(term: str) -> str:
    """Canonical root of a term; identity for canonical and unknown terms."""
    return finding_phrases().get(term, term)


def _template_words() -> list[str]:
    words: set[str] = set()
    for tpl in PRESENT_TEMPLATES + ABSENT_TEMPLATES + (EMPTY_REPORT_SENTENCE,) + PROMPT_TEMPLATES:
        for w in tpl.replace("{term}", "").replace("{syn}", "").replace("{region}", "").split():
            words.add(w)
    return sorted(words)


def all_lexicon_words() -> list[str]:
    """Every surface word of the closed lexicon, sorted and deduplicated."""
    words: set[str] = set()
    for f in CATALOG:
        words.add(f.name)
        for s in f.synonyms:
            words.update(s.split())
    words.update(REGIONS)
    for extra in EXTRA_REGIONS.values():
        words.update(extra)
    words.update(DECOY_TERMS)
    words.update(NEGATION_CUES)
    words.update(LOCATION_PREPOSITIONS)
    words.update(_template_words())
    words.add(SENTENCE_END)
    return sorted(words)
