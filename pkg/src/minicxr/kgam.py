"""Inference-time fact gate over the mini clinical knowledge graph.

Parses a draft report into assertions, standardizes synonym phrases to
their canonical roots, verifies each assertion against the graph under a
closed-world reading (unknown entities fail), and drives the
re-generate/drop correction loop. A report's overall consistency bit is
the all-or-nothing product of its per-assertion indicator checks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from . import lexicon
from .vocab import EOS, SEP, TokenSeq, Vocabulary

RELATIONS = ("is_finding", "located_in", "synonym_of", "is_critical", "incompatible_with")

PASS = "pass"
UNKNOWN_ENTITY = "unknown-entity"
CONTRADICTED = "contradicted"
NONSTANDARD_TERM = "nonstandard-term"


@dataclass(frozen=True)
class KnowledgeTriple:
    subject: str
    relation: str
    object: str


@dataclass(frozen=True)
class Assertion:
    """One extracted claim: an entity with polarity and optional location."""

    entity: str                    # surface phrase as written
    polarity: str                  # "present" | "absent"
    location: str | None = None
    sentence_index: int = 0
    span: tuple[int, int] = (0, 0)  # token range within the report


@dataclass(frozen=True)
class Verdict:
    kind: str
    suggestion: str | None = None
    reason: str = ""

    @property
    def passed(self) -> bool:
        return self.kind == PASS


@dataclass
class CheckReport:
    """Per-assertion verdicts plus the Eq.-product consistency bit."""

    assertions: list[Assertion]
    verdicts: list[Verdict]
    consistent: int
    standardized: TokenSeq
    substitutions: list[tuple[str, str]]

    def failing_sentences(self) -> set[int]:
        return {a.sentence_index for a, v in zip(self.assertions, self.verdicts)
                if not v.passed}


class AssertionList(list):
    """Assertions plus the count of words the parser skipped."""

    unparsed_count: int = 0


class KnowledgeGraph:
    """Immutable triple store with the five fixed relations."""

    def __init__(self, triples: list[KnowledgeTriple]):
        self.triples = tuple(triples)
        self.findings: set[str] = set()
        self.locations: dict[str, set[str]] = {}
        self.synonym_parent: dict[str, str] = {}
        self.critical: set[str] = set()
        self.incompatible: set[frozenset[str]] = set()
        for t in triples:
            if t.relation not in RELATIONS:
                raise ValueError(f"unknown relation {t.relation!r}")
            if t.relation == "is_finding":
                self.findings.add(t.subject)
            elif t.relation == "located_in":
                self.locations.setdefault(t.subject, set()).add(t.object)
            elif t.relation == "synonym_of":
                if t.subject in self.synonym_parent:
                    raise ValueError(f"synonym {t.subject!r} has two parents")
                self.synonym_parent[t.subject] = t.object
            elif t.relation == "is_critical":
                self.critical.add(t.subject)
            elif t.relation == "incompatible_with":
                self.incompatible.add(frozenset((t.subject, t.object)))
        for s in self.synonym_parent:
            if self.canonical(s) in self.synonym_parent:
                raise ValueError(f"synonym chain from {s!r} does not reach a root")

    def canonical(self, term: str) -> str:
        """Follow synonym edges to the root; identity for unknown terms."""
        seen = set()
        while term in self.synonym_parent:
            if term in seen:
                raise ValueError(f"synonym cycle at {term!r}")
            seen.add(term)
            term = self.synonym_parent[term]
        return term

    def licensed_regions(self, finding: str) -> set[str]:
        return self.locations.get(finding, set())

    def incompatible_with(self, a: str, b: str) -> bool:
        return frozenset((a, b)) in self.incompatible

    @classmethod
    def from_file(cls, path) -> "KnowledgeGraph":
        triples = []
        for raw in Path(path).read_text(encoding="utf-8").splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"malformed triple line: {raw!r}")
            triples.append(KnowledgeTriple(*parts))
        return cls(triples)


def default_graph() -> KnowledgeGraph:
    ref = resources.files("minicxr").joinpath("data/clinical_graph.tsv")
    with resources.as_file(ref) as path:
        return KnowledgeGraph.from_file(path)


# ---------------------------------------------------------------------------
# assertion extraction

_REGION_WORDS = set(lexicon.REGIONS) | {r for v in lexicon.EXTRA_REGIONS.values() for r in v}


def _phrase_table() -> list[tuple[tuple[str, ...], str]]:
    """Finding phrases as word tuples, longest first."""
    table = [(tuple(p.split()), p) for p in lexicon.finding_phrases()]
    table.sort(key=lambda e: -len(e[0]))
    return table


_PHRASES = _phrase_table()
_MAX_PHRASE = max(len(w) for w, _ in _PHRASES)


def split_sentences(words: list[str]) -> list[tuple[int, int]]:
    """(start, end) word spans, one per sentence; the '.' belongs to its sentence."""
    spans = []
    start = 0
    for i, w in enumerate(words):
        if w == lexicon.SENTENCE_END:
            spans.append((start, i + 1))
            start = i + 1
    if start < len(words):
        spans.append((start, len(words)))
    return spans


def parse_assertions(report: TokenSeq, vocab: Vocabulary) -> AssertionList:
    """Rule-based extraction over the closed lexicon.

    Finding phrases match longest-first; a negation cue flips polarity to
    absent for the rest of its sentence; a location preposition followed
    by a region attaches to the nearest preceding finding in the sentence.
    Unrecognized words are skipped and counted.
    """
    words = [vocab.word_of(i) for i in report.ids if i > SEP]
    out = AssertionList()
    unparsed = 0
    for s_idx, (lo, hi) in enumerate(split_sentences(words)):
        negated = False
        last_in_sentence: int | None = None
        i = lo
        while i < hi:
            w = words[i]
            if w == lexicon.SENTENCE_END:
                i += 1
                continue
            if w in lexicon.NEGATION_CUES:
                negated = True
                i += 1
                continue
            if (w in lexicon.LOCATION_PREPOSITIONS and i + 1 < hi
                    and words[i + 1] in _REGION_WORDS and last_in_sentence is not None):
                prev = out[last_in_sentence]
                out[last_in_sentence] = Assertion(
                    entity=prev.entity, polarity=prev.polarity,
                    location=words[i + 1], sentence_index=prev.sentence_index,
                    span=(prev.span[0], i + 2))
                i += 2
                continue
            matched = False
            for phrase_words, phrase in _PHRASES:
                k = len(phrase_words)
                if i + k <= hi and tuple(words[i:i + k]) == phrase_words:
                    out.append(Assertion(
                        entity=phrase,
                        polarity="absent" if negated else "present",
                        sentence_index=s_idx, span=(i, i + k)))
                    last_in_sentence = len(out) - 1
                    i += k
                    matched = True
                    break
            if not matched:
                unparsed += 1
                i += 1
    out.unparsed_count = unparsed
    return out


# ---------------------------------------------------------------------------
# fact checking

def fact_check(a: Assertion, graph: KnowledgeGraph,
               others: tuple[Assertion, ...] = ()) -> Verdict:
    """Closed-world check of one assertion.

    Passes iff the canonicalized entity is a known finding, any asserted
    location is licensed by a located_in triple, and no present assertion
    in ``others`` is incompatible with it. A synonym surface form that
    would otherwise pass yields a standardization suggestion instead.
    """
    root = graph.canonical(a.entity)
    if root not in graph.findings:
        return Verdict(UNKNOWN_ENTITY, reason=f"{a.entity!r} is not a known finding")
    if a.entity != root:
        return Verdict(NONSTANDARD_TERM, suggestion=root,
                       reason=f"{a.entity!r} should read {root!r}")
    if a.location is not None and a.location not in graph.licensed_regions(root):
        return Verdict(CONTRADICTED,
                       reason=f"{root!r} is not licensed in {a.location!r}")
    if a.polarity == "present":
        for o in others:
            if o is a or o.polarity != "present":
                continue
            o_root = graph.canonical(o.entity)
            if graph.incompatible_with(root, o_root):
                return Verdict(CONTRADICTED,
                               reason=f"{root!r} is incompatible with {o_root!r}")
    return Verdict(PASS)


def check_assertions(assertions: list[Assertion],
                     graph: KnowledgeGraph) -> list[Verdict]:
    ctx = tuple(assertions)
    return [fact_check(a, graph, others=ctx) for a in assertions]


def consistency_product(verdicts: list[Verdict]) -> int:
    """Indicator product: 1 only when every verdict passes (empty -> 1)."""
    bit = 1
    for v in verdicts:
        bit *= 1 if v.passed else 0
    return bit


def standardize_terms(report: TokenSeq, graph: KnowledgeGraph,
                      vocab: Vocabulary) -> tuple[TokenSeq, list[tuple[str, str]]]:
    """Replace every synonym phrase with its canonical root token.

    Longest-first, left to right, non-overlapping; idempotent because
    canonical roots carry no synonym_of edge. Reserved trailing tokens
    (EOS) are preserved.
    """
    words = [vocab.word_of(i) for i in report.ids if i > SEP]
    had_eos = EOS in report.ids
    table = sorted(((tuple(s.split()), s) for s in graph.synonym_parent),
                   key=lambda e: -len(e[0]))
    out_words: list[str] = []
    subs: list[tuple[str, str]] = []
    i = 0
    while i < len(words):
        replaced = False
        for phrase_words, phrase in table:
            k = len(phrase_words)
            if i + k <= len(words) and tuple(words[i:i + k]) == phrase_words:
                root = graph.canonical(phrase)
                out_words.append(root)
                subs.append((phrase, root))
                i += k
                replaced = True
                break
        if not replaced:
            out_words.append(words[i])
            i += 1
    ids = vocab.encode_words(out_words).ids
    if had_eos:
        ids = ids + (EOS,)
    return TokenSeq(ids), subs


def consistency(report: TokenSeq, graph: KnowledgeGraph,
                vocab: Vocabulary) -> tuple[int, CheckReport]:
    """Standardize, parse, and fact-check a report; product per the gate."""
    std, subs = standardize_terms(report, graph, vocab)
    assertions = parse_assertions(std, vocab)
    verdicts = check_assertions(assertions, graph)
    bit = consistency_product(verdicts)
    return bit, CheckReport(list(assertions), verdicts, bit, std, subs)


# ---------------------------------------------------------------------------
# correction loop

def _sentence_tokens(std: TokenSeq, vocab: Vocabulary) -> list[list[str]]:
    words = [vocab.word_of(i) for i in std.ids if i > SEP]
    return [words[lo:hi] for lo, hi in split_sentences(words)]


def correction_loop(image, prompt: TokenSeq, generator, graph: KnowledgeGraph,
                    vocab: Vocabulary, max_retries: int = 3, seed: int = 0,
                    temperature: float = 0.8,
                    draft_temperature: float | None = None) -> tuple[TokenSeq, list[dict]]:
    """Generate, standardize, check; re-generate failing sentences, then drop.

    ``generator`` must expose ``generate(image, prompt, prefix_tokens=...,
    temperature=..., seed=...) -> TokenSeq`` (greedy when temperature is
    None). The initial draft decodes greedily unless ``draft_temperature``
    is set. Failing sentences are removed from the running prefix and the
    continuation is resampled with a fresh seed, up to ``max_retries``
    times; whatever still fails afterwards is dropped and recorded. The
    returned report is always consistent, and the audit trail records every
    verdict, retry, and drop.
    """
    draft = generator.generate(image, prompt, temperature=draft_temperature, seed=seed)
    audit: list[dict] = []
    tokens = draft
    last_check: CheckReport | None = None
    for attempt in range(max_retries + 1):
        bit, check = consistency(tokens, graph, vocab)
        last_check = check
        audit.append({
            "attempt": attempt,
            "verdicts": [{"entity": a.entity, "polarity": a.polarity,
                          "location": a.location, "sentence": a.sentence_index,
                          "verdict": v.kind, "suggestion": v.suggestion}
                         for a, v in zip(check.assertions, check.verdicts)],
            "consistent": bit,
            "action": "accept" if bit else ("retry" if attempt < max_retries else "drop"),
        })
        if bit:
            return check.standardized, audit
        failing = check.failing_sentences()
        sentences = _sentence_tokens(check.standardized, vocab)
        kept = [w for si, s in enumerate(sentences) if si not in failing for w in s]
        if attempt < max_retries:
            prefix = vocab.encode_words(kept)
            tokens = generator.generate(image, prompt, prefix_tokens=prefix,
                                        temperature=temperature,
                                        seed=(seed + 1 + attempt))
        else:
            dropped = [" ".join(sentences[si]) for si in sorted(failing)]
            audit[-1]["dropped_sentences"] = dropped
            ids = vocab.encode_words(kept).ids
            tokens = TokenSeq(ids + (EOS,))
            bit, check = consistency(tokens, graph, vocab)
            audit.append({"attempt": attempt + 1, "verdicts": [],
                          "consistent": bit, "action": "final-after-drop"})
            return check.standardized, audit
    raise AssertionError("unreachable")


def write_audit_trail(audit: list[dict], path) -> None:
    Path(path).write_text(
        "\n".join(json.dumps(rec, sort_keys=True) for rec in audit) + "\n",
        encoding="utf-8")
