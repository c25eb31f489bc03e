// Static finding lexicon for term highlighting (canonical names first,
// then synonym phrases). Mirrors the service's clinical vocabulary.

export const FINDING_TERMS: string[] = [
  "cardiomegaly", "edema", "consolidation", "atelectasis", "pleural-effusion",
  "pneumothorax", "opacity", "pneumonia", "fracture", "support-device",
  "enlarged-mediastinum", "lung-lesion", "pleural-other", "no-finding-marker",
  "enlarged heart", "cardiac-enlargement", "enlarged cardiac silhouette",
  "cardiac-prominence", "fluid-overload", "vascular congestion",
  "pulmonary edema", "interstitial-edema", "airspace-disease",
  "dense airspace process", "patchy-consolidation", "volume-loss",
  "collapsed lung", "subsegmental-collapse", "pleural fluid",
  "layering effusion", "costophrenic-blunting", "air-leak", "apical-lucency",
  "focal opacity", "shadowing", "patchy opacity", "hazy-opacity",
  "infectious process", "airspace infection", "bronchopneumonia",
  "bony-injury", "rib disruption", "cortical-break", "indwelling-device",
  "support hardware", "central-line", "mediastinal-widening",
  "wide mediastinum", "mediastinal-prominence", "pulmonary-nodule", "mass",
  "pulmonary-mass", "pleural-thickening", "pleural irregularity",
  "pleural-plaque", "clear-lungs",
];

export interface HighlightSpan {
  start: number;  // word index
  length: number; // in words
  term: string;
}

/** Longest-first phrase matching over whitespace words. */
export function findingSpans(text: string): HighlightSpan[] {
  const words = text.split(/\s+/).filter((w) => w.length > 0);
  const phrases = FINDING_TERMS
    .map((t) => t.split(" "))
    .sort((a, b) => b.length - a.length);
  const spans: HighlightSpan[] = [];
  let i = 0;
  while (i < words.length) {
    let matched = false;
    for (const phrase of phrases) {
      if (i + phrase.length <= words.length
          && phrase.every((w, k) => words[i + k] === w)) {
        spans.push({ start: i, length: phrase.length, term: phrase.join(" ") });
        i += phrase.length;
        matched = true;
        break;
      }
    }
    if (!matched) i += 1;
  }
  return spans;
}

/** Wrap matched terms in <mark> (text is whitespace-tokenized, safe). */
export function highlightHtml(text: string): string {
  const words = text.split(/\s+/).filter((w) => w.length > 0);
  const spans = findingSpans(text);
  const starts = new Map(spans.map((s) => [s.start, s.length]));
  const out: string[] = [];
  let i = 0;
  while (i < words.length) {
    const len = starts.get(i);
    if (len !== undefined) {
      out.push(`<mark>${words.slice(i, i + len).join(" ")}</mark>`);
      i += len;
    } else {
      out.push(escapeHtml(words[i]));
      i += 1;
    }
  }
  return out.join(" ");
}

function escapeHtml(w: string): string {
  return w.replace(/&/g, "&amp;").replace(/</g, "&lt;").replace(/>/g, "&gt;");
}
