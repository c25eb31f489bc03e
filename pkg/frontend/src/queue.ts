// Offline-tolerant submission queue.
//
// Submissions that fail with a network error are queued and retried on the
// next flush; a 409 (already answered) counts as settled so reconnecting
// after a duplicate send never double-counts.

import type { Choice, FeedbackApi } from "./api.js";

export interface QueuedSubmission {
  pairId: string;
  choice: Choice;
  raterId: string;
}

export class SubmissionQueue {
  private pending: QueuedSubmission[] = [];
  settled = 0;
  conflicts = 0;

  constructor(private api: FeedbackApi) {}

  get depth(): number {
    return this.pending.length;
  }

  /** Try to submit now; queue on network failure. Returns true if settled. */
  async submit(sub: QueuedSubmission): Promise<boolean> {
    try {
      const res = await this.api.submit(sub.pairId, sub.choice, sub.raterId);
      this.record(res.status);
      return res.status === 200 || res.status === 409;
    } catch {
      this.pending.push(sub);
      return false;
    }
  }

  /** Retry everything queued; keeps items that still cannot reach the service. */
  async flush(): Promise<void> {
    const work = this.pending;
    this.pending = [];
    for (const sub of work) {
      try {
        const res = await this.api.submit(sub.pairId, sub.choice, sub.raterId);
        this.record(res.status);
      } catch {
        this.pending.push(sub);
      }
    }
  }

  private record(status: number): void {
    if (status === 200) this.settled += 1;
    else if (status === 409) this.conflicts += 1; // settled elsewhere; not a loss
  }
}
