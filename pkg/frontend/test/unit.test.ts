import { describe, expect, it, vi } from "vitest";
import { FeedbackApi, type PairPayload } from "../src/api.js";
import { decodeBase64Pgm, toRgba } from "../src/pgm.js";
import { findingSpans, highlightHtml } from "../src/lexicon.js";
import { SubmissionQueue } from "../src/queue.js";
import { LabelingSession, loadRaterId, type View } from "../src/app.js";

function pgmB64(w: number, h: number): string {
  const header = `P5\n${w} ${h}\n255\n`;
  const bytes = new Uint8Array(header.length + w * h);
  for (let i = 0; i < header.length; i++) bytes[i] = header.charCodeAt(i);
  for (let i = 0; i < w * h; i++) bytes[header.length + i] = i % 256;
  return Buffer.from(bytes).toString("base64");
}

describe("graymap decoding", () => {
  it("round-trips dimensions and pixels", () => {
    const img = decodeBase64Pgm(pgmB64(32, 32));
    expect(img.width).toBe(32);
    expect(img.height).toBe(32);
    expect(img.pixels.length).toBe(1024);
    expect(img.pixels[5]).toBe(5);
  });

  it("rejects non-P5 payloads", () => {
    const bad = Buffer.from("P2\n2 2\n255\n0 0 0 0").toString("base64");
    expect(() => decodeBase64Pgm(bad)).toThrow(/not a binary graymap/);
  });

  it("expands to RGBA with integer zoom", () => {
    const img = decodeBase64Pgm(pgmB64(4, 4));
    const rgba = toRgba(img, 2);
    expect(rgba.length).toBe(8 * 8 * 4);
    expect(rgba[3]).toBe(255);
  });
});

describe("finding highlighting", () => {
  it("matches multi-word phrases longest-first", () => {
    const spans = findingSpans("enlarged heart noted . no cardiomegaly .");
    expect(spans).toEqual([
      { start: 0, length: 2, term: "enlarged heart" },
      { start: 5, length: 1, term: "cardiomegaly" },
    ]);
  });

  it("wraps terms in mark tags", () => {
    const html = highlightHtml("opacity in left-mid-zone .");
    expect(html).toContain("<mark>opacity</mark>");
    expect(html).not.toContain("<mark>in</mark>");
  });
});

function mockApi(behavior: {
  pairs?: (PairPayload | null)[];
  submitStatus?: number[];
  failSubmits?: number;
}): FeedbackApi {
  const pairs = [...(behavior.pairs ?? [])];
  const statuses = [...(behavior.submitStatus ?? [])];
  let failLeft = behavior.failSubmits ?? 0;
  const fetchFn = vi.fn(async (url: any, init?: any) => {
    const u = String(url);
    if (u.includes("/api/next-pair")) {
      const next = pairs.length ? pairs.shift()! : null;
      if (next === null) return new Response(null, { status: 204 });
      return new Response(JSON.stringify(next), { status: 200 });
    }
    if (u.includes("/api/preference")) {
      if (failLeft > 0) { failLeft--; throw new TypeError("network down"); }
      const status = statuses.length ? statuses.shift()! : 200;
      return new Response(JSON.stringify({ status: "recorded", pair_id: "x" }),
                          { status });
    }
    if (u.includes("/api/stats")) {
      return new Response(JSON.stringify({ total: 3, per_rater: { r: 3 }, queue_depth: 1 }),
                          { status: 200 });
    }
    return new Response("{}", { status: 404 });
  });
  return new FeedbackApi("http://test", fetchFn as unknown as typeof fetch);
}

function collectView() {
  const events: string[] = [];
  const view: View = {
    showPair: (p) => events.push(`pair:${p.pair.pair_id}`),
    showIdle: () => events.push("idle"),
    showError: (m) => events.push(`error:${m}`),
    showStats: (s) => events.push(`stats:${s ? s.total : "none"}`),
    notifyConflict: (id) => events.push(`conflict:${id}`),
  };
  return { events, view };
}

const P = (i: number): PairPayload => ({
  pair_id: `p${i}`, study_id: `s${i}`, prompt: "prompt",
  image: pgmB64(4, 4), report_a: "a text", report_b: "b text",
});

describe("labeling session", () => {
  it("advances through pairs and reaches idle", async () => {
    const api = mockApi({ pairs: [P(0), P(1), null] });
    const { events, view } = collectView();
    const session = new LabelingSession(api, view, "r1", () => 0.4);
    await session.advance();
    await session.choose("left");
    await session.choose("right");
    expect(session.submitted).toBe(2);
    expect(events).toEqual(["pair:p0", "pair:p1", "idle"]);
    expect(session.state).toBe("idle");
  });

  it("keyboard shortcuts map to panels", async () => {
    const api = mockApi({ pairs: [P(0), P(1), P(2), null] });
    const { view } = collectView();
    const session = new LabelingSession(api, view, "r1", () => 0.9);
    await session.advance();
    await session.onKey("A");
    await session.onKey("b");
    await session.onKey("S");
    expect(session.submitted).toBe(3);
  });

  it("no submission happens without a displayed pair", async () => {
    const api = mockApi({ pairs: [null] });
    const { view } = collectView();
    const session = new LabelingSession(api, view, "r1");
    await session.advance();
    await session.choose("left");
    expect(session.submitted).toBe(0);
  });

  it("409 shows the already-labeled notice and advances", async () => {
    const api = mockApi({ pairs: [P(0), null], submitStatus: [409] });
    const { events, view } = collectView();
    const session = new LabelingSession(api, view, "r1");
    await session.advance();
    await session.choose("skip");
    expect(events).toContain("conflict:p0");
    expect(events[events.length - 1]).toBe("idle");
  });

  it("offline submissions queue and settle on reconnect without double-count", async () => {
    // two consecutive network failures: the immediate send and the
    // queue's own first retry, so the submission genuinely parks
    const api = mockApi({ pairs: [P(0), P(1), null], failSubmits: 2,
                          submitStatus: [200, 409] });
    const { view } = collectView();
    const session = new LabelingSession(api, view, "r1", () => 0.1);
    await session.advance();
    await session.choose("left");          // network down -> queued
    expect(session.queue.depth).toBe(1);
    await session.choose("left");          // flush retries p0 (200), p1 gets 409
    expect(session.queue.depth).toBe(0);
    expect(session.queue.settled).toBe(1); // retried p0 settled exactly once
    expect(session.queue.conflicts).toBe(1);
  });
});

describe("rater identity", () => {
  it("persists across reloads", () => {
    const store = new Map<string, string>();
    const storage = {
      getItem: (k: string) => store.get(k) ?? null,
      setItem: (k: string, v: string) => void store.set(k, v),
    };
    const first = loadRaterId(storage);
    expect(loadRaterId(storage)).toBe(first);
  });
});
