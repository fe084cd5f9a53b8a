/**
 * DOM shell. Rendering is split into pure HTML-string builders (testable
 * without a browser) and a mount() that wires them to the page.
 */

import { ApprovalClient } from "./client.js";
import { ApprovalConsole, ConsoleView } from "./console.js";

const STATUS_LABEL: Record<ConsoleView["status"], string> = {
  connecting: "connecting...",
  running: "running",
  "awaiting-approval": "awaiting approval",
  finished: "finished",
  rejected: "rejected",
  failed: "failed",
  offline: "server unreachable, retrying...",
};

export function esc(s: string): string {
  return s
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

export function renderBatchHtml(view: ConsoleView): string {
  if (view.batch === null) {
    return `<p class="empty">no batch waiting</p>`;
  }
  const rows = view.batch.calls
    .map(
      (c) =>
        `<tr><td class="fn">${esc(c.fn)}</td>` +
        `<td class="args">${esc(c.args)}</td>` +
        `<td class="site">${esc(c.site)}</td></tr>`,
    )
    .join("");
  return (
    `<h2>batch ${view.batch.batch_id}</h2>` +
    `<table><thead><tr><th>function</th><th>arguments</th><th>site</th></tr></thead>` +
    `<tbody>${rows}</tbody></table>`
  );
}

export function renderBannerHtml(view: ConsoleView): string {
  switch (view.status) {
    case "finished":
      return `<p class="result ok">Result: ${esc(view.result ?? "")}</p>`;
    case "rejected":
      return `<p class="result bad">Rejected: ${esc(view.detail ?? "")}</p>`;
    case "failed":
      return `<p class="result bad">Failed: ${esc(view.detail ?? "")}</p>`;
    case "offline":
      return `<p class="banner offline">${esc(STATUS_LABEL.offline)}</p>`;
    default:
      return "";
  }
}

export function renderTraceHtml(view: ConsoleView): string {
  return view.trace
    .map((e) => {
      switch (e.event) {
        case "batch":
          return `batch ${e.batch_id}: ${e.calls.map((c) => c.fn).join(", ")}`;
        case "dispatch":
          return `dispatch ${e.fn} ${e.args}`;
        case "complete":
          return `complete ${e.fn} (${e.latency_ms}ms)`;
        case "rule":
          return `rule ${e.rule}`;
        case "result":
          return e.outcome === "result"
            ? `result ${e.value}`
            : e.outcome === "rejected"
              ? `rejected at batch ${e.batch_id}`
              : `failed: ${e.error}`;
      }
    })
    .map((line) => `<div class="event-line">${esc(line)}</div>`)
    .join("");
}

export function mount(root: Document, baseUrl: string): ApprovalConsole {
  const $ = (id: string) => {
    const el = root.getElementById(id);
    if (el === null) throw new Error(`missing #${id}`);
    return el;
  };
  const statusEl = $("status");
  const batchEl = $("batch");
  const bannerEl = $("banner");
  const traceEl = $("trace");
  const approveBtn = $("approve") as HTMLButtonElement;
  const rejectBtn = $("reject") as HTMLButtonElement;

  const console_ = new ApprovalConsole(new ApprovalClient(baseUrl), {
    onChange(view) {
      statusEl.textContent = STATUS_LABEL[view.status];
      statusEl.className = `badge badge-${view.status}`;
      batchEl.innerHTML = renderBatchHtml(view);
      bannerEl.innerHTML = renderBannerHtml(view);
      traceEl.innerHTML = renderTraceHtml(view);
      traceEl.scrollTop = traceEl.scrollHeight;
      const canDecide = view.status === "awaiting-approval";
      approveBtn.disabled = !canDecide;
      rejectBtn.disabled = !canDecide;
    },
  });
  approveBtn.addEventListener("click", () => void console_.approve());
  rejectBtn.addEventListener("click", () => void console_.reject());
  console_.start();
  return console_;
}
