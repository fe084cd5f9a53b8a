/**
 * Polling state machine behind the console UI.
 *
 * One poll cycle reads /trace then /pending and derives the run status:
 * a terminal trace event wins, otherwise a waiting batch means
 * awaiting-approval, otherwise the run is still working. At most one
 * request is in flight per endpoint; a network failure flips the view
 * to offline and retries with doubling backoff until the server is back.
 */

import { ApprovalClient } from "./client.js";
import { displayValue, PendingBatch, TraceEvent } from "./protocol.js";

export type RunStatus =
  | "connecting"
  | "running"
  | "awaiting-approval"
  | "finished"
  | "rejected"
  | "failed"
  | "offline";

export interface ConsoleView {
  status: RunStatus;
  batch: PendingBatch | null;
  /** terminal value, already display-formatted; null until finished */
  result: string | null;
  /** rejected batch id or failure message, for the terminal banner */
  detail: string | null;
  trace: TraceEvent[];
  polls: number;
}

export interface ConsoleOptions {
  intervalMs?: number;
  maxBackoffMs?: number;
  onChange?: (view: ConsoleView) => void;
}

const terminal = (s: RunStatus) => s === "finished" || s === "rejected" || s === "failed";

export class ApprovalConsole {
  private view: ConsoleView = {
    status: "connecting",
    batch: null,
    result: null,
    detail: null,
    trace: [],
    polls: 0,
  };
  private readonly intervalMs: number;
  private readonly maxBackoffMs: number;
  private readonly onChange: (view: ConsoleView) => void;
  private backoffMs: number;
  private timer: ReturnType<typeof setTimeout> | null = null;
  private polling = false;
  private deciding = false;
  private stopped = false;

  constructor(private readonly client: ApprovalClient, opts: ConsoleOptions = {}) {
    this.intervalMs = opts.intervalMs ?? 1000;
    this.maxBackoffMs = opts.maxBackoffMs ?? 8 * this.intervalMs;
    this.backoffMs = this.intervalMs;
    this.onChange = opts.onChange ?? (() => {});
  }

  current(): ConsoleView {
    return this.view;
  }

  start(): void {
    this.stopped = false;
    void this.poll();
  }

  stop(): void {
    this.stopped = true;
    if (this.timer !== null) clearTimeout(this.timer);
    this.timer = null;
  }

  /** One poll cycle; safe to call directly from tests. */
  async poll(): Promise<ConsoleView> {
    if (this.polling) return this.view;
    this.polling = true;
    try {
      const trace = await this.client.getTrace();
      const last = trace[trace.length - 1];
      if (last !== undefined && last.event === "result") {
        this.update({ trace, batch: null, ...fromResult(last) });
      } else {
        const batch = await this.client.getPending();
        this.update({
          trace,
          batch,
          status: batch !== null ? "awaiting-approval" : "running",
          result: null,
          detail: null,
        });
      }
      this.backoffMs = this.intervalMs;
    } catch {
      this.update({ status: "offline", batch: null });
      this.backoffMs = Math.min(this.backoffMs * 2, this.maxBackoffMs);
    } finally {
      this.polling = false;
    }
    this.schedule();
    return this.view;
  }

  async approve(): Promise<void> {
    return this.decide(true);
  }

  async reject(): Promise<void> {
    return this.decide(false);
  }

  private async decide(approve: boolean): Promise<void> {
    // never fabricate a decision: only the displayed batch can be decided,
    // and only one POST may be outstanding
    if (this.deciding || this.view.status !== "awaiting-approval" || this.view.batch === null) {
      return;
    }
    this.deciding = true;
    const batchId = this.view.batch.batch_id;
    try {
      const outcome = await this.client.postDecision(batchId, approve);
      if (outcome === "accepted") {
        this.update({ status: "running", batch: null });
      }
      // stale: the next poll refreshes the view either way
    } catch {
      this.update({ status: "offline" });
    } finally {
      this.deciding = false;
    }
    await this.poll();
  }

  private update(patch: Partial<ConsoleView>): void {
    this.view = { ...this.view, ...patch, polls: this.view.polls + 1 };
    this.onChange(this.view);
  }

  private schedule(): void {
    if (this.stopped || terminal(this.view.status)) return;
    const delay = this.view.status === "offline" ? this.backoffMs : this.intervalMs;
    if (this.timer !== null) clearTimeout(this.timer);
    this.timer = setTimeout(() => void this.poll(), delay);
  }
}

function fromResult(
  last: Extract<TraceEvent, { event: "result" }>,
): Pick<ConsoleView, "status" | "result" | "detail"> {
  switch (last.outcome) {
    case "result":
      return { status: "finished", result: displayValue(last.value), detail: null };
    case "rejected":
      return { status: "rejected", result: null, detail: `batch ${last.batch_id}` };
    case "failed":
      return { status: "failed", result: null, detail: last.error };
  }
}
