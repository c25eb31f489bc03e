// Typed client for the preference-collection service.

export interface PairPayload {
  pair_id: string;
  study_id: string;
  prompt: string;
  image: string; // base64 P5 graymap
  report_a: string;
  report_b: string;
}

export interface Stats {
  total: number;
  per_rater: Record<string, number>;
  queue_depth: number;
}

export type Choice = "A" | "B" | "skip";

export interface SubmitResult {
  status: number; // 200 recorded, 409 already answered, 400/404 errors
  body: { status: string; pair_id: string };
}

export class FeedbackApi {
  constructor(private baseUrl: string,
              private fetchFn: typeof fetch = fetch) {}

  /** Next unanswered pair for this rater, or null when the queue is empty. */
  async nextPair(raterId: string): Promise<PairPayload | null> {
    const resp = await this.fetchFn(
      `${this.baseUrl}/api/next-pair?rater=${encodeURIComponent(raterId)}`);
    if (resp.status === 204) return null;
    if (!resp.ok) throw new Error(`next-pair failed: ${resp.status}`);
    return (await resp.json()) as PairPayload;
  }

  async submit(pairId: string, choice: Choice, raterId: string): Promise<SubmitResult> {
    const resp = await this.fetchFn(`${this.baseUrl}/api/preference`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ pair_id: pairId, choice, rater_id: raterId }),
    });
    const body = await resp.json();
    return { status: resp.status, body };
  }

  async stats(): Promise<Stats> {
    const resp = await this.fetchFn(`${this.baseUrl}/api/stats`);
    if (!resp.ok) throw new Error(`stats failed: ${resp.status}`);
    return (await resp.json()) as Stats;
  }
}
