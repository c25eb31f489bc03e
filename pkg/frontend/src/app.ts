// Labeling session driver: poll for pairs, render, record choices.
//
// All service interaction and state transitions live here, DOM-free, so
// the same code path the browser runs is testable headlessly; index.html
// binds it to actual elements.

import { FeedbackApi, type Choice, type Stats } from "./api.js";
import { placePair, derandomize, type PlacedPair, type PanelChoice } from "./randomize.js";
import { SubmissionQueue } from "./queue.js";

export type SessionState = "idle" | "showing" | "submitting" | "error";

export interface View {
  showPair(placed: PlacedPair): void;
  showIdle(): void;
  showError(message: string): void;
  showStats(stats: Stats | null): void;
  notifyConflict(pairId: string): void;
}

export class LabelingSession {
  state: SessionState = "idle";
  current: PlacedPair | null = null;
  submitted = 0;

  constructor(private api: FeedbackApi, private view: View,
              public raterId: string,
              private rng: () => number = Math.random) {
    this.queue = new SubmissionQueue(api);
  }

  queue: SubmissionQueue;

  /** Fetch and display the next pair; idle state when the queue is empty. */
  async advance(): Promise<void> {
    try {
      const pair = await this.api.nextPair(this.raterId);
      if (pair === null) {
        this.state = "idle";
        this.current = null;
        this.view.showIdle();
        return;
      }
      this.current = placePair(pair, this.rng);
      this.state = "showing";
      this.view.showPair(this.current);
    } catch (err) {
      this.state = "error";
      this.view.showError(String(err));
    }
  }

  /** Record the rater's panel pick (requires a displayed pair). */
  async choose(panel: PanelChoice): Promise<void> {
    if (this.state !== "showing" || this.current === null) return;
    const placed = this.current;
    const choice: Choice = derandomize(placed, panel);
    this.state = "submitting";
    await this.queue.flush();
    const res = await this.api.submit(placed.pair.pair_id, choice, this.raterId)
      .catch(() => null);
    if (res === null) {
      // offline: queue and move on, the flush on reconnect settles it
      await this.queue.submit({ pairId: placed.pair.pair_id, choice,
                                raterId: this.raterId });
    } else if (res.status === 200) {
      this.submitted += 1;
    } else if (res.status === 409) {
      this.view.notifyConflict(placed.pair.pair_id);
    } else {
      this.view.showError(`${res.status}: ${res.body.status} (${placed.pair.pair_id})`);
    }
    await this.advance();
  }

  /** Keyboard mapping: A / B / S select left / right / skip. */
  async onKey(key: string): Promise<void> {
    const k = key.toLowerCase();
    if (k === "a") await this.choose("left");
    else if (k === "b") await this.choose("right");
    else if (k === "s") await this.choose("skip");
  }

  async refreshStats(): Promise<void> {
    try {
      this.view.showStats(await this.api.stats());
    } catch {
      this.view.showStats(null);
    }
  }
}

export function loadRaterId(storage: Pick<Storage, "getItem" | "setItem">): string {
  const existing = storage.getItem("rater-id");
  if (existing) return existing;
  const fresh = `rater-${Math.floor(Math.random() * 1e6)}`;
  storage.setItem("rater-id", fresh);
  return fresh;
}
