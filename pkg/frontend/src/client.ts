/** Thin HTTP client over the approval endpoint. Fetch is injectable for tests. */

import {
  PendingBatch,
  TraceEvent,
  encodeDecision,
  parsePending,
  parseTrace,
  ProtocolError,
} from "./protocol.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export type DecisionOutcome = "accepted" | "stale";

export class ApprovalClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchFn: FetchLike = (url, init) => fetch(url, init),
  ) {}

  /** The waiting batch, or null while the run is between batches. */
  async getPending(): Promise<PendingBatch | null> {
    const res = await this.fetchFn(`${this.baseUrl}/pending`);
    if (res.status === 204) return null;
    if (res.status !== 200) throw new ProtocolError(`GET /pending: HTTP ${res.status}`);
    return parsePending(await res.text());
  }

  async postDecision(batchId: number, approve: boolean): Promise<DecisionOutcome> {
    const res = await this.fetchFn(`${this.baseUrl}/decision`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: encodeDecision(batchId, approve),
    });
    if (res.status === 200) return "accepted";
    // the batch resolved (or was never ours) before the click landed
    if (res.status === 409) return "stale";
    throw new ProtocolError(`POST /decision: HTTP ${res.status}`);
  }

  async getTrace(): Promise<TraceEvent[]> {
    const res = await this.fetchFn(`${this.baseUrl}/trace`);
    if (res.status !== 200) throw new ProtocolError(`GET /trace: HTTP ${res.status}`);
    return parseTrace(await res.text());
  }
}
