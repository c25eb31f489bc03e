import { describe, expect, it } from "vitest";
import { placePair, derandomize } from "../src/randomize.js";
import type { PairPayload } from "../src/api.js";

function pair(i: number): PairPayload {
  return {
    pair_id: `p${i}`, study_id: `s${i}`, prompt: "describe the chest study",
    image: "", report_a: `report alpha ${i}`, report_b: `report beta ${i}`,
  };
}

// deterministic linear-congruential stream for reproducible placement
function lcg(seed: number): () => number {
  let state = seed >>> 0;
  return () => {
    state = (state * 1664525 + 1013904223) >>> 0;
    return state / 2 ** 32;
  };
}

describe("placement randomization", () => {
  it("is roughly balanced over 100 views", () => {
    const rng = lcg(7);
    let leftCount = 0;
    for (let i = 0; i < 100; i++) {
      if (placePair(pair(i), rng).aOnLeft) leftCount++;
    }
    // binomial(100, .5): 3.5 sigma band
    expect(leftCount).toBeGreaterThanOrEqual(33);
    expect(leftCount).toBeLessThanOrEqual(67);
  });

  it("shows report A text on the placed side", () => {
    const rng = lcg(3);
    for (let i = 0; i < 20; i++) {
      const placed = placePair(pair(i), rng);
      if (placed.aOnLeft) {
        expect(placed.leftText).toBe(placed.pair.report_a);
        expect(placed.rightText).toBe(placed.pair.report_b);
      } else {
        expect(placed.leftText).toBe(placed.pair.report_b);
        expect(placed.rightText).toBe(placed.pair.report_a);
      }
    }
  });

  it("derandomizes 100/100 panel picks to the true identity", () => {
    const rng = lcg(11);
    for (let i = 0; i < 100; i++) {
      const placed = placePair(pair(i), rng);
      // the rater always prefers report A's text, wherever it sits
      const panel = placed.leftText === placed.pair.report_a ? "left" : "right";
      expect(derandomize(placed, panel)).toBe("A");
      const panelB = panel === "left" ? "right" : "left";
      expect(derandomize(placed, panelB)).toBe("B");
    }
  });

  it("skip is position-independent", () => {
    const placed = placePair(pair(1), () => 0.9);
    expect(derandomize(placed, "skip")).toBe("skip");
  });
});
