/**
 * Wire types for the interpreter's approval endpoint.
 *
 *   GET  /pending   -> PendingBatch JSON, or HTTP 204 while nothing waits
 *   POST /decision  <- {"batch_id": <int>, "approve": <bool>}
 *   GET  /trace     -> ordered TraceEvent list
 *
 * Parsers are strict: anything off-schema throws ProtocolError rather
 * than leaking a half-typed object into the UI. The encoder mirrors the
 * server's own JSON layout so request and response fixtures stay
 * byte-identical across both sides.
 */

export interface ApprovalCall {
  fn: string;
  args: string;
  site: string;
}

export interface PendingBatch {
  batch_id: number;
  calls: ApprovalCall[];
}

export type TraceEvent =
  | { event: "batch"; batch_id: number; calls: ApprovalCall[] }
  | { event: "dispatch"; task: number; fn: string; args: string; site: string }
  | { event: "complete"; task: number; fn: string; latency_ms: number }
  | { event: "rule"; rule: string; site: number[] }
  | { event: "result"; outcome: "result"; value: string }
  | { event: "result"; outcome: "rejected"; batch_id: number }
  | { event: "result"; outcome: "failed"; error: string };

export class ProtocolError extends Error {}

function fail(msg: string): never {
  throw new ProtocolError(msg);
}

function asObject(x: unknown, what: string): Record<string, unknown> {
  if (typeof x !== "object" || x === null || Array.isArray(x)) {
    fail(`${what}: expected an object`);
  }
  return x as Record<string, unknown>;
}

function asInt(x: unknown, what: string): number {
  if (typeof x !== "number" || !Number.isInteger(x)) fail(`${what}: expected an integer`);
  return x;
}

function asString(x: unknown, what: string): string {
  if (typeof x !== "string") fail(`${what}: expected a string`);
  return x;
}

function parseCall(x: unknown): ApprovalCall {
  const o = asObject(x, "call");
  return {
    fn: asString(o.fn, "call.fn"),
    args: asString(o.args, "call.args"),
    site: asString(o.site, "call.site"),
  };
}

export function parsePending(text: string): PendingBatch {
  const o = asObject(JSON.parse(text), "pending batch");
  const calls = o.calls;
  if (!Array.isArray(calls) || calls.length === 0) fail("pending batch: calls must be a non-empty array");
  return {
    batch_id: asInt(o.batch_id, "pending batch.batch_id"),
    calls: calls.map(parseCall),
  };
}

export function parseAck(text: string): { ok: true } {
  const o = asObject(JSON.parse(text), "decision ack");
  if (o.ok !== true) fail("decision ack: expected ok=true");
  return { ok: true };
}

export function parseErrorBody(text: string): string {
  const o = asObject(JSON.parse(text), "error body");
  return asString(o.error, "error body.error");
}

function parseTraceEvent(x: unknown): TraceEvent {
  const o = asObject(x, "trace event");
  switch (o.event) {
    case "batch":
      return {
        event: "batch",
        batch_id: asInt(o.batch_id, "batch.batch_id"),
        calls: Array.isArray(o.calls) ? o.calls.map(parseCall) : fail("batch.calls"),
      };
    case "dispatch":
      return {
        event: "dispatch",
        task: asInt(o.task, "dispatch.task"),
        fn: asString(o.fn, "dispatch.fn"),
        args: asString(o.args, "dispatch.args"),
        site: asString(o.site, "dispatch.site"),
      };
    case "complete":
      if (typeof o.latency_ms !== "number") fail("complete.latency_ms");
      return {
        event: "complete",
        task: asInt(o.task, "complete.task"),
        fn: asString(o.fn, "complete.fn"),
        latency_ms: o.latency_ms,
      };
    case "rule":
      if (!Array.isArray(o.site) || !o.site.every((s) => Number.isInteger(s))) fail("rule.site");
      return { event: "rule", rule: asString(o.rule, "rule.rule"), site: o.site as number[] };
    case "result":
      if (o.outcome === "result") return { event: "result", outcome: "result", value: asString(o.value, "result.value") };
      if (o.outcome === "rejected") return { event: "result", outcome: "rejected", batch_id: asInt(o.batch_id, "result.batch_id") };
      if (o.outcome === "failed") return { event: "result", outcome: "failed", error: asString(o.error, "result.error") };
      fail(`result: unknown outcome ${String(o.outcome)}`);
    // eslint-disable-next-line no-fallthrough -- fail() never returns
    default:
      fail(`trace event: unknown kind ${String(o.event)}`);
  }
}

export function parseTrace(text: string): TraceEvent[] {
  const arr = JSON.parse(text);
  if (!Array.isArray(arr)) fail("trace: expected an array");
  return arr.map(parseTraceEvent);
}

// -- canonical encoding ------------------------------------------------------

export interface PyJsonOptions {
  /** keys whose values are reals on the wire: integral numbers render as "100.0" */
  floatKeys?: readonly string[];
}

/**
 * Serialize exactly like the server does (Python json.dumps defaults):
 * ", " between items, ": " after keys, non-ASCII escaped as \uXXXX.
 * JS numbers forget whether they were floats, so float-typed fields
 * must be named via floatKeys to round-trip byte-for-byte.
 */
export function pyJson(value: unknown, opts: PyJsonOptions = {}): string {
  const floats = new Set(opts.floatKeys ?? []);
  const enc = (v: unknown, key: string | null): string => {
    if (v === null) return "null";
    if (v === true) return "true";
    if (v === false) return "false";
    if (typeof v === "number") {
      if (!Number.isFinite(v)) throw new ProtocolError("cannot encode non-finite number");
      if (key !== null && floats.has(key) && Number.isInteger(v)) return `${v}.0`;
      return String(v);
    }
    if (typeof v === "string") return pyString(v);
    if (Array.isArray(v)) return `[${v.map((x) => enc(x, null)).join(", ")}]`;
    if (typeof v === "object") {
      const parts = Object.entries(v as Record<string, unknown>).map(
        ([k, x]) => `${pyString(k)}: ${enc(x, k)}`,
      );
      return `{${parts.join(", ")}}`;
    }
    throw new ProtocolError(`cannot encode ${typeof v}`);
  };
  return enc(value, null);
}

function pyString(s: string): string {
  let out = '"';
  for (const ch of s) {
    const code = ch.codePointAt(0)!;
    if (ch === '"') out += '\\"';
    else if (ch === "\\") out += "\\\\";
    else if (ch === "\n") out += "\\n";
    else if (ch === "\r") out += "\\r";
    else if (ch === "\t") out += "\\t";
    // json.dumps keeps ensure_ascii on; escape controls and non-ASCII alike
    else if (code < 0x20 || code > 0x7e) out += escapeCode(code);
    else out += ch;
  }
  return out + '"';
}

function escapeCode(code: number): string {
  if (code <= 0xffff) return "\\u" + code.toString(16).padStart(4, "0");
  const v = code - 0x10000;
  const hi = 0xd800 + (v >> 10);
  const lo = 0xdc00 + (v & 0x3ff);
  return escapeCode(hi) + escapeCode(lo);
}

export function encodeDecision(batchId: number, approve: boolean): string {
  return pyJson({ batch_id: batchId, approve });
}

// -- display helpers ---------------------------------------------------------

/** Human rendering of a terminal value: booleans read like the source language. */
export function displayValue(value: string): string {
  if (value === "true") return "True";
  if (value === "false") return "False";
  return value;
}
