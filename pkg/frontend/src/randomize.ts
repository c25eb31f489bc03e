// A/B screen-position randomization and its exact inverse.
//
// Reports are shuffled on screen to control position bias; the submitted
// choice must always refer to the generated-report identity, never the
// panel the rater happened to click.

import type { Choice, PairPayload } from "./api.js";

export interface PlacedPair {
  pair: PairPayload;
  /** true when report A is displayed in the left panel */
  aOnLeft: boolean;
  leftText: string;
  rightText: string;
}

export type PanelChoice = "left" | "right" | "skip";

/** Deterministic in the rng provided; Math.random in production. */
export function placePair(pair: PairPayload, rng: () => number = Math.random): PlacedPair {
  const aOnLeft = rng() < 0.5;
  return {
    pair,
    aOnLeft,
    leftText: aOnLeft ? pair.report_a : pair.report_b,
    rightText: aOnLeft ? pair.report_b : pair.report_a,
  };
}

/** Map the rater's panel pick back to the true report identity. */
export function derandomize(placed: PlacedPair, panel: PanelChoice): Choice {
  if (panel === "skip") return "skip";
  if (panel === "left") return placed.aOnLeft ? "A" : "B";
  return placed.aOnLeft ? "B" : "A";
}
